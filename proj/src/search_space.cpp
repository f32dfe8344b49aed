#include "spider/search_space.hpp"

#include <cstdio>
#include <random>
#include <sstream>

#include "spider/rng.hpp"

namespace spider {

namespace {

constexpr OpKind kAllOps[kNumOps] = {
    OpKind::none,         OpKind::skip_connect, OpKind::max_pool_3x3, OpKind::avg_pool_3x3,
    OpKind::sep_conv_3x3, OpKind::sep_conv_5x5, OpKind::dil_conv_3x3, OpKind::dil_conv_5x5,
};

constexpr const char* kOpNames[kNumOps] = {
    "none",         "skip_connect", "max_pool_3x3", "avg_pool_3x3",
    "sep_conv_3x3", "sep_conv_5x5", "dil_conv_3x3", "dil_conv_5x5",
};

struct CellPlan {
    CellKind kind;
    int channels;        // node channel count
    int c_pp, c_p;       // channel counts of the raw s0/s1 inputs
    bool reduction_prev; // s0 arrives at double resolution
};

struct NetPlan {
    int stem_out;
    std::vector<CellPlan> cells;
    int classifier_in;
};

NetPlan make_plan(const SupernetSpec& spec) {
    NetPlan plan;
    plan.stem_out = spec.stem_multiplier * spec.init_channels;
    int c_pp = plan.stem_out, c_p = plan.stem_out;
    int channels = spec.init_channels;
    bool red_prev = false;
    for (int i = 0; i < spec.num_cells; ++i) {
        const bool red = is_reduction_position(i, spec.num_cells);
        if (red) channels *= 2;
        plan.cells.push_back({red ? CellKind::reduction : CellKind::normal, channels, c_pp,
                              c_p, red_prev});
        c_pp = c_p;
        c_p = kNumNodes * channels;
        red_prev = red;
    }
    plan.classifier_in = c_p;
    return plan;
}

std::string cell_prefix(int cell) { return "cell" + std::to_string(cell); }

std::string op_prefix(int cell, int edge, OpKind op) {
    char buf[80];
    std::snprintf(buf, sizeof buf, "cell%d.e%02d.%s", cell, edge, op_name(op));
    return buf;
}

int ceil_half(int x) { return (x + 1) / 2; }

int op_kernel(OpKind op) {
    switch (op) {
        case OpKind::sep_conv_3x3:
        case OpKind::dil_conv_3x3: return 3;
        case OpKind::sep_conv_5x5:
        case OpKind::dil_conv_5x5: return 5;
        default: return 0;
    }
}

bool is_sep(OpKind op) { return op == OpKind::sep_conv_3x3 || op == OpKind::sep_conv_5x5; }
bool is_dil(OpKind op) { return op == OpKind::dil_conv_3x3 || op == OpKind::dil_conv_5x5; }

// MACs of one op instance at output resolution r (square), channels c.
int64_t op_macs(OpKind op, int c, int r) {
    const int64_t area = static_cast<int64_t>(r) * r;
    const int k = op_kernel(op);
    if (is_sep(op)) return 2 * (static_cast<int64_t>(c) * k * k + static_cast<int64_t>(c) * c) * area;
    if (is_dil(op)) return (static_cast<int64_t>(c) * k * k + static_cast<int64_t>(c) * c) * area;
    return 0;
}

// Tensor elements one op instance materializes (input at r_src, output at r_out).
int64_t op_activations(OpKind op, int c, int r_src, int r_out, int stride) {
    const int64_t in_area = static_cast<int64_t>(r_src) * r_src;
    const int64_t out_area = static_cast<int64_t>(r_out) * r_out;
    switch (op) {
        case OpKind::none: return c * out_area;
        case OpKind::skip_connect: return stride == 1 ? 0 : c * out_area;
        case OpKind::max_pool_3x3:
        case OpKind::avg_pool_3x3: return 2 * c * out_area;  // pool + bn
        default: break;
    }
    if (is_sep(op)) return c * in_area + 7 * c * out_area;  // relu, then 7 staged outputs
    return c * in_area + 3 * c * out_area;                  // dil: relu, dw, pw, bn
}

void init_kaiming_uniform(Tensor& t, const std::string& name, uint64_t seed) {
    const auto& s = t.shape();
    int64_t fan_in = 1;
    if (s.size() == 4) fan_in = static_cast<int64_t>(s[1]) * s[2] * s[3];
    else if (s.size() == 2) fan_in = s[1];
    else if (s.size() == 1) return;  // biases start at zero
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    auto rng = std::mt19937_64(derive_seed(seed, name));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.data_mut()) v = static_cast<real>(dist(rng));
}

}  // namespace

const char* op_name(OpKind op) { return kOpNames[static_cast<int>(op)]; }

std::optional<OpKind> op_from_name(std::string_view name) {
    for (int i = 0; i < kNumOps; ++i)
        if (name == kOpNames[i]) return static_cast<OpKind>(i);
    return std::nullopt;
}

const char* cell_kind_name(CellKind k) { return k == CellKind::normal ? "normal" : "reduction"; }

std::pair<int, int> edge_endpoints(int edge) {
    for (int j = 0; j < kNumNodes; ++j) {
        const int base = j * (j + 3) / 2;
        if (edge < base + j + 2) return {j, edge - base};
    }
    throw UsageError("edge index out of range");
}

void SupernetSpec::validate() const {
    if (num_cells < 1) throw ConfigError("num_cells must be >= 1");
    if (init_channels < 1) throw ConfigError("init_channels must be >= 1");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
    if (image_size < 2) throw ConfigError("image_size must be >= 2");
    if (stem_multiplier < 1) throw ConfigError("stem_multiplier must be >= 1");
}

bool is_reduction_position(int cell_index, int num_cells) {
    if (num_cells <= 1) return false;
    if (num_cells == 2) return cell_index == 1;
    return cell_index == num_cells / 3 || cell_index == 2 * num_cells / 3;
}

ArchMask ArchMask::full() {
    ArchMask m;
    for (auto& kind : m.active)
        for (auto& edge : kind) edge.fill(true);
    return m;
}

int ArchMask::active_count(CellKind k, int edge) const {
    int n = 0;
    for (bool b : active[static_cast<size_t>(k)][static_cast<size_t>(edge)]) n += b ? 1 : 0;
    return n;
}

std::vector<OpKind> ArchMask::active_ops(CellKind k, int edge) const {
    std::vector<OpKind> out;
    for (int i = 0; i < kNumOps; ++i)
        if (active[static_cast<size_t>(k)][static_cast<size_t>(edge)][static_cast<size_t>(i)])
            out.push_back(static_cast<OpKind>(i));
    return out;
}

bool ArchMask::fully_finalized() const {
    for (int k = 0; k < 2; ++k)
        for (int e = 0; e < kNumEdges; ++e)
            if (!edge_finalized(static_cast<CellKind>(k), e)) return false;
    return true;
}

void ArchMask::remove(CellKind k, int edge, OpKind op) {
    if (!is_active(k, edge, op)) throw UsageError("removing an inactive op");
    if (active_count(k, edge) <= 1) throw UsageError("an edge must keep at least one active op");
    set(k, edge, op, false);
}

void ArchMask::finalize(CellKind k, int edge, OpKind op) {
    if (!is_active(k, edge, op)) throw UsageError("finalizing an inactive op");
    for (int i = 0; i < kNumOps; ++i) set(k, edge, static_cast<OpKind>(i), false);
    set(k, edge, op, true);
}

bool ArchMask::subset_of(const ArchMask& other) const {
    for (int k = 0; k < 2; ++k)
        for (int e = 0; e < kNumEdges; ++e)
            for (int o = 0; o < kNumOps; ++o)
                if (active[k][e][o] && !other.active[k][e][o]) return false;
    return true;
}

std::string mask_to_text(const ArchMask& mask) {
    std::ostringstream out;
    out << "# supernet mask: cell kind -> edge -> active ops\n";
    for (int k = 0; k < 2; ++k) {
        out << '[' << cell_kind_name(static_cast<CellKind>(k)) << "]\n";
        for (int e = 0; e < kNumEdges; ++e) {
            char label[8];
            std::snprintf(label, sizeof label, "e%02d", e);
            out << label << " =";
            for (OpKind op : mask.active_ops(static_cast<CellKind>(k), e))
                out << ' ' << op_name(op);
            out << '\n';
        }
    }
    return out.str();
}

ArchMask mask_from_text(const std::string& text) {
    ArchMask mask;  // starts all-inactive; filled below
    std::array<std::array<bool, kNumEdges>, 2> seen{};
    std::istringstream in(text);
    std::string line;
    int kind = -1;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        std::istringstream ls(line);
        std::string tok;
        ls >> tok;
        if (tok == "[normal]") { kind = 0; continue; }
        if (tok == "[reduction]") { kind = 1; continue; }
        if (kind < 0 || tok.size() != 3 || tok[0] != 'e')
            throw DataFormatError("mask text: unexpected token '" + tok + "' at line " +
                                  std::to_string(lineno));
        const int e = std::stoi(tok.substr(1));
        if (e < 0 || e >= kNumEdges)
            throw DataFormatError("mask text: edge out of range at line " + std::to_string(lineno));
        ls >> tok;  // '='
        if (tok != "=") throw DataFormatError("mask text: expected '=' at line " + std::to_string(lineno));
        int count = 0;
        while (ls >> tok) {
            auto op = op_from_name(tok);
            if (!op) throw DataFormatError("mask text: unknown op '" + tok + "' at line " +
                                           std::to_string(lineno));
            mask.set(static_cast<CellKind>(kind), e, *op, true);
            ++count;
        }
        if (count == 0)
            throw DataFormatError("mask text: edge with no active op at line " + std::to_string(lineno));
        seen[static_cast<size_t>(kind)][static_cast<size_t>(e)] = true;
    }
    for (int k = 0; k < 2; ++k)
        for (int e = 0; e < kNumEdges; ++e)
            if (!seen[k][e])
                throw DataFormatError(std::string("mask text: missing edge e") + std::to_string(e) +
                                      " in [" + cell_kind_name(static_cast<CellKind>(k)) + "]");
    return mask;
}

void walk_params(const SupernetSpec& spec, const std::function<void(const ParamInfo&)>& fn) {
    spec.validate();
    const NetPlan plan = make_plan(spec);
    fn({"stem.conv", {plan.stem_out, spec.in_channels, 3, 3}, false, -1, CellKind::normal, -1,
        OpKind::none});
    for (int i = 0; i < spec.num_cells; ++i) {
        const CellPlan& cp = plan.cells[static_cast<size_t>(i)];
        const int C = cp.channels;
        const std::string cpfx = cell_prefix(i);
        if (cp.reduction_prev) {
            fn({cpfx + ".pre0.fr1", {C - C / 2, cp.c_pp, 1, 1}, false, i, cp.kind, -1, OpKind::none});
            fn({cpfx + ".pre0.fr2", {C / 2, cp.c_pp, 1, 1}, false, i, cp.kind, -1, OpKind::none});
        } else {
            fn({cpfx + ".pre0", {C, cp.c_pp, 1, 1}, false, i, cp.kind, -1, OpKind::none});
        }
        fn({cpfx + ".pre1", {C, cp.c_p, 1, 1}, false, i, cp.kind, -1, OpKind::none});
        for (int e = 0; e < kNumEdges; ++e) {
            for (OpKind op : kAllOps) {
                const int k = op_kernel(op);
                if (k == 0) continue;  // parameter-free op
                const std::string pfx = op_prefix(i, e, op);
                if (is_sep(op)) {
                    fn({pfx + ".dw1", {C, 1, k, k}, true, i, cp.kind, e, op});
                    fn({pfx + ".pw1", {C, C, 1, 1}, true, i, cp.kind, e, op});
                    fn({pfx + ".dw2", {C, 1, k, k}, true, i, cp.kind, e, op});
                    fn({pfx + ".pw2", {C, C, 1, 1}, true, i, cp.kind, e, op});
                } else {
                    fn({pfx + ".dw", {C, 1, k, k}, true, i, cp.kind, e, op});
                    fn({pfx + ".pw", {C, C, 1, 1}, true, i, cp.kind, e, op});
                }
            }
        }
    }
    fn({"classifier.w", {spec.num_classes, plan.classifier_in}, false, -1, CellKind::normal, -1,
        OpKind::none});
    fn({"classifier.b", {spec.num_classes}, false, -1, CellKind::normal, -1, OpKind::none});
}

ParamStore build_supernet(const SupernetSpec& spec, uint64_t seed) {
    ParamStore store;
    walk_params(spec, [&](const ParamInfo& info) {
        Tensor t = Tensor::zeros(info.shape, /*requires_grad=*/true);
        init_kaiming_uniform(t, info.name, seed);
        store.insert(info.name, std::move(t));
    });
    return store;
}

std::vector<std::string> mask_param_names(const SupernetSpec& spec, const ArchMask& mask) {
    std::vector<std::string> names;
    walk_params(spec, [&](const ParamInfo& info) {
        if (!info.is_op || mask.is_active(info.kind, info.edge, info.op))
            names.push_back(info.name);
    });
    return names;
}

ParamStore mask_weights(const ParamStore& w, const ArchMask& mask, const SupernetSpec& spec) {
    const auto names = mask_param_names(spec, mask);
    for (const auto& n : names)
        if (!w.has(n)) throw UsageError("mask_weights: store does not contain " + n +
                                        " (store/spec mismatch)");
    return w.select(names);
}

int64_t count_params(const ArchMask& mask, const SupernetSpec& spec) {
    int64_t n = 0;
    walk_params(spec, [&](const ParamInfo& info) {
        if (!info.is_op || mask.is_active(info.kind, info.edge, info.op))
            n += shape_numel(info.shape);
    });
    return n;
}

int64_t count_flops(const ArchMask& mask, const SupernetSpec& spec) {
    spec.validate();
    const NetPlan plan = make_plan(spec);
    int64_t macs = static_cast<int64_t>(plan.stem_out) * spec.in_channels * 9 *
                   spec.image_size * spec.image_size;
    int r_p = spec.image_size;
    for (int i = 0; i < spec.num_cells; ++i) {
        const CellPlan& cp = plan.cells[static_cast<size_t>(i)];
        const int C = cp.channels;
        const int r_in = r_p;
        const int r_out = cp.kind == CellKind::reduction ? ceil_half(r_in) : r_in;
        const int64_t in_area = static_cast<int64_t>(r_in) * r_in;
        macs += static_cast<int64_t>(C) * cp.c_pp * in_area;  // pre0 (plain or factorized)
        macs += static_cast<int64_t>(C) * cp.c_p * in_area;   // pre1
        for (int e = 0; e < kNumEdges; ++e)
            for (OpKind op : mask.active_ops(cp.kind, e))
                macs += op_macs(op, C, r_out);
        r_p = r_out;
    }
    macs += static_cast<int64_t>(spec.num_classes) * plan.classifier_in;
    return macs;
}

int64_t activation_elems(const ArchMask& mask, const SupernetSpec& spec) {
    spec.validate();
    const NetPlan plan = make_plan(spec);
    int64_t elems = 2LL * plan.stem_out * spec.image_size * spec.image_size;  // stem conv + bn
    int r_pp = spec.image_size, r_p = spec.image_size;
    for (int i = 0; i < spec.num_cells; ++i) {
        const CellPlan& cp = plan.cells[static_cast<size_t>(i)];
        const int C = cp.channels;
        const int r_in = r_p;
        const int r_out = cp.kind == CellKind::reduction ? ceil_half(r_in) : r_in;
        const int64_t in_area = static_cast<int64_t>(r_in) * r_in;
        const int64_t out_area = static_cast<int64_t>(r_out) * r_out;
        // pre0
        if (cp.reduction_prev) {
            elems += static_cast<int64_t>(cp.c_pp) * r_pp * r_pp;          // relu
            elems += static_cast<int64_t>(cp.c_pp) * (r_pp - 1) * (r_pp - 1);  // crop
            elems += static_cast<int64_t>(C - C / 2) * in_area;            // fr1
            elems += static_cast<int64_t>(C / 2) * in_area;                // fr2
            elems += 2LL * C * in_area;                                    // concat + bn
        } else {
            elems += static_cast<int64_t>(cp.c_pp) * r_pp * r_pp + 2LL * C * in_area;
        }
        // pre1
        elems += static_cast<int64_t>(cp.c_p) * r_p * r_p + 2LL * C * in_area;
        for (int j = 0; j < kNumNodes; ++j) {
            for (int s = 0; s < j + 2; ++s) {
                const int e = edge_index(j, s);
                const int stride = (cp.kind == CellKind::reduction && s < 2) ? 2 : 1;
                const int r_src = s < 2 ? r_in : r_out;
                const auto ops = mask.active_ops(cp.kind, e);
                for (OpKind op : ops) elems += op_activations(op, C, r_src, r_out, stride);
                if (ops.size() > 1) elems += 2LL * C * out_area;  // add_n + scale
            }
            elems += static_cast<int64_t>(C) * out_area;  // node sum
        }
        elems += static_cast<int64_t>(kNumNodes) * C * out_area;  // concat
        r_pp = r_p;
        r_p = r_out;
    }
    elems += plan.classifier_in;   // global average pool
    elems += spec.num_classes;     // logits
    return elems;
}

std::vector<std::pair<int, int>> cell_output_shapes(const SupernetSpec& spec) {
    const NetPlan plan = make_plan(spec);
    std::vector<std::pair<int, int>> out;
    int r = spec.image_size;
    for (const auto& cp : plan.cells) {
        if (cp.kind == CellKind::reduction) r = ceil_half(r);
        out.emplace_back(kNumNodes * cp.channels, r);
    }
    return out;
}

Tensor op_forward(Tape* tape, OpKind op, const ParamStore& params, const std::string& prefix,
                  const Tensor& x, int stride) {
    const int C = x.dim(1);
    switch (op) {
        case OpKind::none: {
            const int oh = stride == 1 ? x.dim(2) : ceil_half(x.dim(2));
            const int ow = stride == 1 ? x.dim(3) : ceil_half(x.dim(3));
            return materialize_zeros(tape, {x.dim(0), C, oh, ow});
        }
        case OpKind::skip_connect:
            return stride == 1 ? x : subsample2(tape, x);
        case OpKind::max_pool_3x3:
            return batch_norm(tape, pool2d(tape, x, PoolKind::max, 3, stride, 1), kBnEps);
        case OpKind::avg_pool_3x3:
            return batch_norm(tape, pool2d(tape, x, PoolKind::avg, 3, stride, 1), kBnEps);
        case OpKind::sep_conv_3x3:
        case OpKind::sep_conv_5x5: {
            const int k = op_kernel(op);
            const int pad = k / 2;
            Tensor t = relu(tape, x);
            t = conv2d(tape, t, params.at(prefix + ".dw1"), {stride, pad, 1, C});
            t = conv2d(tape, t, params.at(prefix + ".pw1"), {1, 0, 1, 1});
            t = batch_norm(tape, t, kBnEps);
            t = relu(tape, t);
            t = conv2d(tape, t, params.at(prefix + ".dw2"), {1, pad, 1, C});
            t = conv2d(tape, t, params.at(prefix + ".pw2"), {1, 0, 1, 1});
            return batch_norm(tape, t, kBnEps);
        }
        case OpKind::dil_conv_3x3:
        case OpKind::dil_conv_5x5: {
            const int k = op_kernel(op);
            const int pad = k - 1;  // dilation 2 keeps spatial dims at stride 1
            Tensor t = relu(tape, x);
            t = conv2d(tape, t, params.at(prefix + ".dw"), {stride, pad, 2, C});
            t = conv2d(tape, t, params.at(prefix + ".pw"), {1, 0, 1, 1});
            return batch_norm(tape, t, kBnEps);
        }
    }
    throw UsageError("unknown op kind");
}

Tensor edge_mixture_forward(Tape* tape, const ParamStore& params, const ArchMask& mask,
                            int cell_index, CellKind kind, int edge, const Tensor& x, int stride) {
    const auto ops = mask.active_ops(kind, edge);
    if (ops.empty()) throw UsageError("edge with no active op");
    std::vector<Tensor> branches;
    branches.reserve(ops.size());
    for (OpKind op : ops)
        branches.push_back(op_forward(tape, op, params, op_prefix(cell_index, edge, op), x, stride));
    if (branches.size() == 1) return branches[0];
    return scale(tape, add_n(tape, branches), real(1) / static_cast<real>(branches.size()));
}

Tensor supernet_forward(Tape* tape, const ParamStore& params, const ArchMask& mask,
                        const Tensor& input, const SupernetSpec& spec) {
    spec.validate();
    if (input.shape().size() != 4 || input.dim(1) != spec.in_channels ||
        input.dim(2) != spec.image_size || input.dim(3) != spec.image_size)
        throw DimensionError("supernet_forward: input shape does not match spec");
    const NetPlan plan = make_plan(spec);

    Tensor stem = batch_norm(tape, conv2d(tape, input, params.at("stem.conv"), {1, 1, 1, 1}), kBnEps);
    Tensor s0 = stem, s1 = stem;
    for (int i = 0; i < spec.num_cells; ++i) {
        const CellPlan& cp = plan.cells[static_cast<size_t>(i)];
        const std::string cpfx = cell_prefix(i);
        Tensor t0;
        if (cp.reduction_prev) {
            // factorized stride-2 projection aligning s0 to s1's resolution
            Tensor r = relu(tape, s0);
            Tensor a = conv2d(tape, r, params.at(cpfx + ".pre0.fr1"), {2, 0, 1, 1});
            Tensor b = conv2d(tape, crop_tl(tape, r), params.at(cpfx + ".pre0.fr2"), {2, 0, 1, 1});
            t0 = batch_norm(tape, concat_channels(tape, {a, b}), kBnEps);
        } else {
            t0 = batch_norm(tape, conv2d(tape, relu(tape, s0), params.at(cpfx + ".pre0"), {1, 0, 1, 1}),
                            kBnEps);
        }
        Tensor t1 = batch_norm(tape, conv2d(tape, relu(tape, s1), params.at(cpfx + ".pre1"), {1, 0, 1, 1}),
                               kBnEps);
        std::vector<Tensor> states = {t0, t1};
        for (int j = 0; j < kNumNodes; ++j) {
            std::vector<Tensor> incoming;
            incoming.reserve(static_cast<size_t>(j) + 2);
            for (int s = 0; s < j + 2; ++s) {
                const int stride = (cp.kind == CellKind::reduction && s < 2) ? 2 : 1;
                incoming.push_back(edge_mixture_forward(tape, params, mask, i, cp.kind,
                                                        edge_index(j, s), states[static_cast<size_t>(s)],
                                                        stride));
            }
            states.push_back(add_n(tape, incoming));
        }
        Tensor out = concat_channels(tape, {states[2], states[3], states[4], states[5]});
        s0 = s1;
        s1 = out;
    }
    return linear(tape, global_avg_pool(tape, s1), params.at("classifier.w"),
                  params.at("classifier.b"));
}

std::string export_dot(const ArchMask& mask) {
    std::ostringstream out;
    for (int k = 0; k < 2; ++k) {
        const CellKind kind = static_cast<CellKind>(k);
        out << "digraph " << cell_kind_name(kind) << "_cell {\n";
        out << "  rankdir=LR;\n";
        out << "  \"c_{k-2}\" [shape=box];\n";
        out << "  \"c_{k-1}\" [shape=box];\n";
        for (int j = 0; j < kNumNodes; ++j) out << "  \"" << j << "\";\n";
        out << "  \"output\" [shape=box];\n";
        for (int j = 0; j < kNumNodes; ++j) {
            for (int s = 0; s < j + 2; ++s) {
                std::string src = s == 0 ? "c_{k-2}" : s == 1 ? "c_{k-1}" : std::to_string(s - 2);
                for (OpKind op : mask.active_ops(kind, edge_index(j, s))) {
                    out << "  \"" << src << "\" -> \"" << j << "\" [label=\"" << op_name(op)
                        << "\"];\n";
                }
            }
            out << "  \"" << j << "\" -> \"output\";\n";
        }
        out << "}\n";
    }
    return out.str();
}

}  // namespace spider
