#include "sortednet/models.hpp"

#include <cmath>

#include "sortednet/rng.hpp"

namespace sortednet {

void ParamStore::add(const std::string& name, Tensor t) {
    if (has(name)) sn_fail("duplicate_tensor", "param store already holds " + name);
    index_.emplace(name, names_.size());
    names_.push_back(name);
    tensors_.emplace(name, std::move(t));
}

const Tensor& ParamStore::tensor(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) sn_fail("unknown_tensor", "param store has no tensor " + name);
    return it->second;
}

Tensor& ParamStore::tensor(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) sn_fail("unknown_tensor", "param store has no tensor " + name);
    return it->second;
}

std::int64_t ParamStore::total_elements() const {
    std::int64_t n = 0;
    for (const std::string& name : names_) n += tensor(name).numel();
    return n;
}

ParamStore ParamStore::snapshot() const {
    ParamStore out;
    out.init_seed_ = init_seed_;
    for (const std::string& name : names_) out.add(name, tensor(name).clone());
    return out;
}

std::vector<double> ParamStore::flatten() const {
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(total_elements()));
    for (const std::string& name : names_) {
        const auto& v = tensor(name).vec();
        flat.insert(flat.end(), v.begin(), v.end());
    }
    return flat;
}

void ParamStore::unflatten(const std::vector<double>& flat) {
    std::size_t off = 0;
    for (const std::string& name : names_) {
        auto& v = tensor(name).vec();
        if (off + v.size() > flat.size()) sn_fail("shape_mismatch", "unflatten: vector too short");
        std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
                  flat.begin() + static_cast<std::ptrdiff_t>(off + v.size()), v.begin());
        off += v.size();
    }
    if (off != flat.size()) sn_fail("shape_mismatch", "unflatten: vector too long");
}

void MlpConfig::validate() const {
    if (input_dim < 1 || hidden_dim < 1 || num_layers < 1 || num_classes < 2) {
        sn_fail("invalid_config", "mlp config: all dimensions must be positive (classes >= 2)");
    }
}

void TransformerConfig::validate() const {
    if (vocab_size < 2 || max_seq_len < 1 || d_model < 1 || num_layers < 1 || num_heads < 1 || ffn_multiplier < 1) {
        sn_fail("invalid_config", "transformer config: all dimensions must be positive");
    }
    if (explicit_head_dim == 0 && d_model % num_heads != 0) {
        sn_fail("invalid_config", "transformer config: d_model " + std::to_string(d_model) +
                                      " not divisible by num_heads " + std::to_string(num_heads));
    }
}

// ---- initialization ---------------------------------------------------------

namespace {

enum class InitKind { weight, bias, embedding, norm_gain };

void init_tensor(Tensor& t, InitKind kind, Rng& rng) {
    switch (kind) {
        case InitKind::weight: {
            const double bound = 1.0 / std::sqrt(static_cast<double>(t.dim(0)));
            for (double& v : t.vec()) v = rng.uniform(-bound, bound);
            break;
        }
        case InitKind::bias:
            break; // zeros
        case InitKind::embedding:
            for (double& v : t.vec()) v = rng.normal(0.0, 0.02);
            break;
        case InitKind::norm_gain:
            std::fill(t.vec().begin(), t.vec().end(), 1.0);
            break;
    }
}

} // namespace

// ---- MLP ---------------------------------------------------------------------

ParamStore Mlp::init(const MlpConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ParamStore store;
    store.set_init_seed(seed);
    Rng rng(seed);
    for (int l = 0; l < cfg.num_layers; ++l) {
        const int in = l == 0 ? cfg.input_dim : cfg.hidden_dim;
        Tensor w(Shape{in, cfg.hidden_dim}, true);
        init_tensor(w, InitKind::weight, rng);
        store.add("layer" + std::to_string(l) + ".w", std::move(w));
        Tensor b(Shape{cfg.hidden_dim}, true);
        init_tensor(b, InitKind::bias, rng);
        store.add("layer" + std::to_string(l) + ".b", std::move(b));
    }
    Tensor cw(Shape{cfg.hidden_dim, cfg.num_classes}, true);
    init_tensor(cw, InitKind::weight, rng);
    store.add("cls.w", std::move(cw));
    Tensor cb(Shape{cfg.num_classes}, true);
    init_tensor(cb, InitKind::bias, rng);
    store.add("cls.b", std::move(cb));
    return store;
}

ModelLayout mlp_layout(const MlpConfig& cfg, const ManyInOneSpec& spec) {
    cfg.validate();
    const int width_dim = spec.dim_index("width");
    const int depth_dim = spec.dim_index("depth");
    if (width_dim >= 0 && spec.dims()[static_cast<std::size_t>(width_dim)].max_index != cfg.hidden_dim) {
        sn_fail("invalid_spec", "mlp layout: width max_index must equal hidden_dim");
    }
    if (depth_dim >= 0 && spec.dims()[static_cast<std::size_t>(depth_dim)].max_index != cfg.num_layers) {
        sn_fail("invalid_spec", "mlp layout: depth max_index must equal num_layers");
    }

    ModelLayout layout;
    for (int l = 0; l < cfg.num_layers; ++l) {
        const int in = l == 0 ? cfg.input_dim : cfg.hidden_dim;
        TensorBinding w;
        w.name = "layer" + std::to_string(l) + ".w";
        w.full_shape = {in, cfg.hidden_dim};
        w.counts_macs = true;
        if (width_dim >= 0) {
            if (l > 0) w.axes.push_back({0, width_dim, 1});
            w.axes.push_back({1, width_dim, 1});
        }
        if (depth_dim >= 0) {
            w.depth_dim = depth_dim;
            w.layer_index = l + 1;
        }
        layout.tensors.push_back(std::move(w));

        TensorBinding b;
        b.name = "layer" + std::to_string(l) + ".b";
        b.full_shape = {cfg.hidden_dim};
        if (width_dim >= 0) b.axes.push_back({0, width_dim, 1});
        if (depth_dim >= 0) {
            b.depth_dim = depth_dim;
            b.layer_index = l + 1;
        }
        layout.tensors.push_back(std::move(b));
    }

    // shared classifier: cut on the input axis only
    TensorBinding cw;
    cw.name = "cls.w";
    cw.full_shape = {cfg.hidden_dim, cfg.num_classes};
    cw.counts_macs = true;
    if (width_dim >= 0) cw.axes.push_back({0, width_dim, 1});
    layout.tensors.push_back(std::move(cw));

    TensorBinding cb;
    cb.name = "cls.b";
    cb.full_shape = {cfg.num_classes};
    layout.tensors.push_back(std::move(cb));

    layout.validate_against(spec);
    return layout;
}

Mlp::Mlp(MlpConfig cfg, const ManyInOneSpec& spec)
    : cfg_(cfg), spec_(spec), layout_(mlp_layout(cfg, spec)) {}

Tensor Mlp::forward(const SubModelView& view, const Tensor& x) const {
    if (x.ndim() != 2 || x.dim(1) != cfg_.input_dim) {
        sn_fail("shape_mismatch", "mlp forward: input " + shape_str(x.shape()) + " expected [batch," +
                                      std::to_string(cfg_.input_dim) + "]");
    }
    const int depth_dim = spec_.dim_index("depth");
    const int active_layers = depth_dim >= 0 ? view.index().b[static_cast<std::size_t>(depth_dim)] : cfg_.num_layers;

    Tensor h = x;
    for (int l = 0; l < active_layers; ++l) {
        const std::string prefix = "layer" + std::to_string(l);
        h = relu(add(matmul(h, view.fetch(prefix + ".w")), view.fetch(prefix + ".b")));
    }
    return add(matmul(h, view.fetch("cls.w")), view.fetch("cls.b"));
}

Tensor Mlp::forward_masked(const ParamStore& params, const Tensor& x,
                           const std::vector<std::vector<double>>& layer_masks) const {
    if (static_cast<int>(layer_masks.size()) != cfg_.num_layers) {
        sn_fail("shape_mismatch", "mlp forward_masked: need one mask per layer");
    }
    Tensor h = x;
    for (int l = 0; l < cfg_.num_layers; ++l) {
        const std::vector<double>& m = layer_masks[static_cast<std::size_t>(l)];
        if (static_cast<int>(m.size()) != cfg_.hidden_dim) {
            sn_fail("shape_mismatch", "mlp forward_masked: mask length " + std::to_string(m.size()) +
                                          " expected " + std::to_string(cfg_.hidden_dim));
        }
        const std::string prefix = "layer" + std::to_string(l);
        h = relu(add(matmul(h, params.tensor(prefix + ".w")), params.tensor(prefix + ".b")));
        h = mul(h, Tensor(Shape{cfg_.hidden_dim}, m));
    }
    return add(matmul(h, params.tensor("cls.w")), params.tensor("cls.b"));
}

// ---- transformer ---------------------------------------------------------------

ParamStore TinyTransformer::init(const TransformerConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ParamStore store;
    store.set_init_seed(seed);
    Rng rng(seed);
    const int d = cfg.d_model;
    const int hd_total = cfg.num_heads * cfg.head_dim();
    const int m = cfg.ffn_dim();

    auto weight = [&](const std::string& name, int rows, int cols) {
        Tensor t(Shape{rows, cols}, true);
        init_tensor(t, InitKind::weight, rng);
        store.add(name, std::move(t));
    };
    auto bias = [&](const std::string& name, int n) {
        Tensor t(Shape{n}, true);
        init_tensor(t, InitKind::bias, rng);
        store.add(name, std::move(t));
    };
    auto emb = [&](const std::string& name, int rows, int cols) {
        Tensor t(Shape{rows, cols}, true);
        init_tensor(t, InitKind::embedding, rng);
        store.add(name, std::move(t));
    };
    auto norm = [&](const std::string& prefix) {
        Tensor g(Shape{d}, true);
        init_tensor(g, InitKind::norm_gain, rng);
        store.add(prefix + ".g", std::move(g));
        Tensor b(Shape{d}, true);
        init_tensor(b, InitKind::bias, rng);
        store.add(prefix + ".b", std::move(b));
    };

    emb("tok_emb", cfg.vocab_size, d);
    emb("pos_emb", cfg.max_seq_len, d);
    for (int l = 0; l < cfg.num_layers; ++l) {
        const std::string p = "blk" + std::to_string(l);
        norm(p + ".ln1");
        weight(p + ".attn.wq", d, hd_total);
        bias(p + ".attn.bq", hd_total);
        weight(p + ".attn.wk", d, hd_total);
        bias(p + ".attn.bk", hd_total);
        weight(p + ".attn.wv", d, hd_total);
        bias(p + ".attn.bv", hd_total);
        weight(p + ".attn.wo", hd_total, d);
        bias(p + ".attn.bo", d);
        norm(p + ".ln2");
        weight(p + ".ffn.w1", d, m);
        bias(p + ".ffn.b1", m);
        weight(p + ".ffn.w2", m, d);
        bias(p + ".ffn.b2", d);
    }
    norm("final_ln");
    weight("cls.w", d, cfg.vocab_size);
    bias("cls.b", cfg.vocab_size);
    return store;
}

ModelLayout transformer_layout(const TransformerConfig& cfg, const ManyInOneSpec& spec) {
    cfg.validate();
    const int width_dim = spec.dim_index("width");
    const int depth_dim = spec.dim_index("depth");
    const int heads_dim = spec.dim_index("heads");
    if (width_dim >= 0 && spec.dims()[static_cast<std::size_t>(width_dim)].max_index != cfg.d_model) {
        sn_fail("invalid_spec", "transformer layout: width max_index must equal d_model");
    }
    if (depth_dim >= 0 && spec.dims()[static_cast<std::size_t>(depth_dim)].max_index != cfg.num_layers) {
        sn_fail("invalid_spec", "transformer layout: depth max_index must equal num_layers");
    }
    if (heads_dim >= 0 && spec.dims()[static_cast<std::size_t>(heads_dim)].max_index != cfg.num_heads) {
        sn_fail("invalid_spec", "transformer layout: heads max_index must equal num_heads");
    }

    const int d = cfg.d_model;
    const int hd = cfg.head_dim();
    const int hd_total = cfg.num_heads * hd;
    const int m = cfg.ffn_dim();

    ModelLayout layout;
    auto width_axis = [&](TensorBinding& t, int axis) {
        if (width_dim >= 0) t.axes.push_back({axis, width_dim, 1});
    };
    auto heads_axis = [&](TensorBinding& t, int axis) {
        if (heads_dim >= 0) t.axes.push_back({axis, heads_dim, hd});
    };
    auto ffn_axis = [&](TensorBinding& t, int axis) {
        if (width_dim >= 0) t.axes.push_back({axis, width_dim, cfg.ffn_multiplier});
    };
    auto gate = [&](TensorBinding& t, int layer) {
        if (depth_dim >= 0) {
            t.depth_dim = depth_dim;
            t.layer_index = layer + 1;
        }
    };
    auto push = [&](TensorBinding t) { layout.tensors.push_back(std::move(t)); };

    {
        TensorBinding t;
        t.name = "tok_emb";
        t.full_shape = {cfg.vocab_size, d};
        width_axis(t, 1);
        push(std::move(t));
    }
    {
        TensorBinding t;
        t.name = "pos_emb";
        t.full_shape = {cfg.max_seq_len, d};
        width_axis(t, 1);
        push(std::move(t));
    }
    enum class VecKind { width, heads, ffn };
    for (int l = 0; l < cfg.num_layers; ++l) {
        const std::string p = "blk" + std::to_string(l);
        auto vec_tensor = [&](const std::string& name, int n, VecKind kind) {
            TensorBinding t;
            t.name = name;
            t.full_shape = {n};
            switch (kind) {
                case VecKind::width: width_axis(t, 0); break;
                case VecKind::heads: heads_axis(t, 0); break;
                case VecKind::ffn: ffn_axis(t, 0); break;
            }
            gate(t, l);
            push(std::move(t));
        };
        vec_tensor(p + ".ln1.g", d, VecKind::width);
        vec_tensor(p + ".ln1.b", d, VecKind::width);
        for (const char* wn : {".attn.wq", ".attn.wk", ".attn.wv"}) {
            TensorBinding t;
            t.name = p + wn;
            t.full_shape = {d, hd_total};
            t.counts_macs = true;
            width_axis(t, 0);
            heads_axis(t, 1);
            gate(t, l);
            push(std::move(t));
        }
        vec_tensor(p + ".attn.bq", hd_total, VecKind::heads);
        vec_tensor(p + ".attn.bk", hd_total, VecKind::heads);
        vec_tensor(p + ".attn.bv", hd_total, VecKind::heads);
        {
            TensorBinding t;
            t.name = p + ".attn.wo";
            t.full_shape = {hd_total, d};
            t.counts_macs = true;
            heads_axis(t, 0);
            width_axis(t, 1);
            gate(t, l);
            push(std::move(t));
        }
        vec_tensor(p + ".attn.bo", d, VecKind::width);
        vec_tensor(p + ".ln2.g", d, VecKind::width);
        vec_tensor(p + ".ln2.b", d, VecKind::width);
        {
            TensorBinding t;
            t.name = p + ".ffn.w1";
            t.full_shape = {d, m};
            t.counts_macs = true;
            width_axis(t, 0);
            ffn_axis(t, 1);
            gate(t, l);
            push(std::move(t));
        }
        vec_tensor(p + ".ffn.b1", m, VecKind::ffn);
        {
            TensorBinding t;
            t.name = p + ".ffn.w2";
            t.full_shape = {m, d};
            t.counts_macs = true;
            ffn_axis(t, 0);
            width_axis(t, 1);
            gate(t, l);
            push(std::move(t));
        }
        vec_tensor(p + ".ffn.b2", d, VecKind::width);
    }
    {
        TensorBinding t;
        t.name = "final_ln.g";
        t.full_shape = {d};
        width_axis(t, 0);
        push(std::move(t));
    }
    {
        TensorBinding t;
        t.name = "final_ln.b";
        t.full_shape = {d};
        width_axis(t, 0);
        push(std::move(t));
    }
    {
        // shared classifier: cut on the input axis only
        TensorBinding t;
        t.name = "cls.w";
        t.full_shape = {d, cfg.vocab_size};
        t.counts_macs = true;
        width_axis(t, 0);
        push(std::move(t));
    }
    {
        TensorBinding t;
        t.name = "cls.b";
        t.full_shape = {cfg.vocab_size};
        push(std::move(t));
    }

    layout.validate_against(spec);
    return layout;
}

TinyTransformer::TinyTransformer(TransformerConfig cfg, const ManyInOneSpec& spec)
    : cfg_(cfg), spec_(spec), layout_(transformer_layout(cfg, spec)) {}

Tensor TinyTransformer::forward(const SubModelView& view, const std::vector<std::vector<int>>& token_ids) const {
    const int batch = static_cast<int>(token_ids.size());
    if (batch == 0) sn_fail("shape_mismatch", "transformer forward: empty batch");
    const int seq = static_cast<int>(token_ids[0].size());
    if (seq == 0) sn_fail("shape_mismatch", "transformer forward: empty sequence");
    if (seq > cfg_.max_seq_len) {
        sn_fail("context_overflow", "transformer forward: sequence length " + std::to_string(seq) +
                                        " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
    }
    std::vector<int> flat_ids;
    flat_ids.reserve(static_cast<std::size_t>(batch) * seq);
    std::vector<int> pos_ids;
    pos_ids.reserve(flat_ids.capacity());
    for (const auto& row : token_ids) {
        if (static_cast<int>(row.size()) != seq) sn_fail("shape_mismatch", "transformer forward: ragged batch");
        for (int i = 0; i < seq; ++i) {
            flat_ids.push_back(row[static_cast<std::size_t>(i)]);
            pos_ids.push_back(i);
        }
    }

    const int depth_dim = spec_.dim_index("depth");
    const int heads_dim = spec_.dim_index("heads");
    const int active_layers = depth_dim >= 0 ? view.index().b[static_cast<std::size_t>(depth_dim)] : cfg_.num_layers;
    const int active_heads = heads_dim >= 0 ? view.index().b[static_cast<std::size_t>(heads_dim)] : cfg_.num_heads;

    Tensor h = add(embedding_lookup(view.fetch("tok_emb"), flat_ids),
                   embedding_lookup(view.fetch("pos_emb"), pos_ids)); // [B*T, w]

    for (int l = 0; l < active_layers; ++l) {
        const std::string p = "blk" + std::to_string(l);
        Tensor x1 = layer_norm(h, view.fetch(p + ".ln1.g"), view.fetch(p + ".ln1.b"));
        Tensor q = add(matmul(x1, view.fetch(p + ".attn.wq")), view.fetch(p + ".attn.bq"));
        Tensor k = add(matmul(x1, view.fetch(p + ".attn.wk")), view.fetch(p + ".attn.bk"));
        Tensor v = add(matmul(x1, view.fetch(p + ".attn.wv")), view.fetch(p + ".attn.bv"));
        const int hdt = q.dim(1);
        Tensor attn = causal_attention(reshape(q, {batch, seq, hdt}), reshape(k, {batch, seq, hdt}),
                                       reshape(v, {batch, seq, hdt}), active_heads);
        Tensor proj = add(matmul(reshape(attn, {batch * seq, hdt}), view.fetch(p + ".attn.wo")),
                          view.fetch(p + ".attn.bo"));
        h = add(h, proj);
        Tensor x2 = layer_norm(h, view.fetch(p + ".ln2.g"), view.fetch(p + ".ln2.b"));
        Tensor f = gelu(add(matmul(x2, view.fetch(p + ".ffn.w1")), view.fetch(p + ".ffn.b1")));
        Tensor f2 = add(matmul(f, view.fetch(p + ".ffn.w2")), view.fetch(p + ".ffn.b2"));
        h = add(h, f2);
    }

    Tensor out = layer_norm(h, view.fetch("final_ln.g"), view.fetch("final_ln.b"));
    Tensor logits = add(matmul(out, view.fetch("cls.w")), view.fetch("cls.b"));
    return reshape(logits, {batch, seq, cfg_.vocab_size});
}

MlpConfig mlp_subconfig(const MlpConfig& cfg, const ManyInOneSpec& spec, const SubModelIndex& idx) {
    MlpConfig out = cfg;
    const int wd = spec.dim_index("width");
    const int dd = spec.dim_index("depth");
    if (wd >= 0) out.hidden_dim = idx.b[static_cast<std::size_t>(wd)];
    if (dd >= 0) out.num_layers = idx.b[static_cast<std::size_t>(dd)];
    return out;
}

TransformerConfig transformer_subconfig(const TransformerConfig& cfg, const ManyInOneSpec& spec,
                                        const SubModelIndex& idx) {
    TransformerConfig out = cfg;
    out.explicit_head_dim = cfg.head_dim(); // per-head size is fixed across sub-models
    const int wd = spec.dim_index("width");
    const int dd = spec.dim_index("depth");
    const int hd = spec.dim_index("heads");
    if (wd >= 0) out.d_model = idx.b[static_cast<std::size_t>(wd)];
    if (dd >= 0) out.num_layers = idx.b[static_cast<std::size_t>(dd)];
    if (hd >= 0) out.num_heads = idx.b[static_cast<std::size_t>(hd)];
    return out;
}

} // namespace sortednet
