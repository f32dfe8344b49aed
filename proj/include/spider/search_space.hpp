#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "spider/core.hpp"
#include "spider/param_store.hpp"

namespace spider {

// DARTS-style supernet: a stack of cells, each a 7-node DAG (2 inputs, 4
// intermediate nodes, 1 depth-wise concat output). Every edge carries a
// mixture of candidate operations; a client's child architecture is a
// boolean mask over (cell kind, edge, op).

enum class OpKind : int {
    none = 0,
    skip_connect,
    max_pool_3x3,
    avg_pool_3x3,
    sep_conv_3x3,
    sep_conv_5x5,
    dil_conv_3x3,
    dil_conv_5x5,
};
constexpr int kNumOps = 8;
constexpr int kNumNodes = 4;   // intermediate nodes per cell
constexpr int kNumEdges = 14;  // 2+3+4+5
constexpr real kBnEps = real(1e-5);

const char* op_name(OpKind op);
std::optional<OpKind> op_from_name(std::string_view name);

enum class CellKind : int { normal = 0, reduction = 1 };
const char* cell_kind_name(CellKind k);

// Linear edge index for (node j, source s), s in [0, j+2): 0 and 1 are the
// cell inputs, s>=2 is intermediate node s-2.
inline int edge_index(int node, int src) { return node * (node + 3) / 2 + src; }
std::pair<int, int> edge_endpoints(int edge);  // -> (node, src)

struct SupernetSpec {
    int num_cells = 8;
    int init_channels = 16;
    int num_classes = 10;
    int in_channels = 3;
    int image_size = 32;  // square inputs
    int stem_multiplier = 3;

    void validate() const;
    bool operator==(const SupernetSpec&) const = default;
};

// Reduction cells sit at 1-indexed positions 3 and 6 for the default
// 8-cell stack (0-indexed n/3 and 2n/3). Desk-scale stacks: a 2-cell net is
// [normal, reduction]; a 1-cell net is [normal].
bool is_reduction_position(int cell_index, int num_cells);

struct ArchMask {
    // active[kind][edge][op]
    std::array<std::array<std::array<bool, kNumOps>, kNumEdges>, 2> active{};

    static ArchMask full();

    bool is_active(CellKind k, int edge, OpKind op) const {
        return active[static_cast<size_t>(k)][static_cast<size_t>(edge)][static_cast<size_t>(op)];
    }
    void set(CellKind k, int edge, OpKind op, bool v) {
        active[static_cast<size_t>(k)][static_cast<size_t>(edge)][static_cast<size_t>(op)] = v;
    }
    int active_count(CellKind k, int edge) const;
    std::vector<OpKind> active_ops(CellKind k, int edge) const;
    bool edge_finalized(CellKind k, int edge) const { return active_count(k, edge) == 1; }
    bool fully_finalized() const;

    // Deactivate one op; the edge must keep at least one active op.
    void remove(CellKind k, int edge, OpKind op);
    // Keep exactly `op` on the edge.
    void finalize(CellKind k, int edge, OpKind op);
    bool subset_of(const ArchMask& other) const;

    bool operator==(const ArchMask&) const = default;
};

std::string mask_to_text(const ArchMask& mask);
ArchMask mask_from_text(const std::string& text);

// --- parameter schema ------------------------------------------------------

struct ParamInfo {
    std::string name;
    std::vector<int> shape;
    bool is_op = false;  // edge-op parameter, as opposed to stem/classifier/preprocessing
    int cell = -1;
    CellKind kind = CellKind::normal;
    int edge = -1;
    OpKind op = OpKind::none;
};

// Visits every parameter of the supernet in a fixed order. Single source of
// truth for initialization, masking and parameter accounting.
void walk_params(const SupernetSpec& spec, const std::function<void(const ParamInfo&)>& fn);

ParamStore build_supernet(const SupernetSpec& spec, uint64_t seed);

std::vector<std::string> mask_param_names(const SupernetSpec& spec, const ArchMask& mask);

// Projection w (.) a: the entries of `w` whose op is active in `mask`, plus
// all mask-independent entries. Shares tensor storage with `w`.
ParamStore mask_weights(const ParamStore& w, const ArchMask& mask, const SupernetSpec& spec);

int64_t count_params(const ArchMask& mask, const SupernetSpec& spec);

// Multiply-accumulate count (1 MAC = 1 FLOP) of the masked network's convs
// and linear layers at batch 1; pooling, skip, none and normalization cost 0.
int64_t count_flops(const ArchMask& mask, const SupernetSpec& spec);

// Elements of every tensor the forward pass materializes at batch 1 under
// the mask (identity skips alias their input and are not counted).
int64_t activation_elems(const ArchMask& mask, const SupernetSpec& spec);

// (channels, height) of each cell's concatenated output, for shape probes.
std::vector<std::pair<int, int>> cell_output_shapes(const SupernetSpec& spec);

// --- forward ---------------------------------------------------------------

Tensor op_forward(Tape* tape, OpKind op, const ParamStore& params, const std::string& prefix,
                  const Tensor& x, int stride);

// Uniform mixture over the edge's active ops: (1/|active|) * sum of active
// op outputs, where none contributes zero.
Tensor edge_mixture_forward(Tape* tape, const ParamStore& params, const ArchMask& mask,
                            int cell_index, CellKind kind, int edge, const Tensor& x, int stride);

Tensor supernet_forward(Tape* tape, const ParamStore& params, const ArchMask& mask,
                        const Tensor& input, const SupernetSpec& spec);

// One digraph per cell kind; every active op is one labeled edge.
std::string export_dot(const ArchMask& mask);

}  // namespace spider
