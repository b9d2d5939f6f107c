#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "sortednet/sorted_config.hpp"
#include "sortednet/tensor.hpp"

namespace sortednet {

// Ordered collection of named parameter tensors; the single source of truth
// shared by all sub-models.
class ParamStore {
public:
    ParamStore() = default;

    void add(const std::string& name, Tensor t);
    const Tensor& tensor(const std::string& name) const;
    Tensor& tensor(const std::string& name);
    bool has(const std::string& name) const { return index_.count(name) != 0; }

    const std::vector<std::string>& names() const { return names_; }
    std::size_t size() const { return names_.size(); }
    std::int64_t total_elements() const;

    std::uint64_t init_seed() const { return init_seed_; }
    void set_init_seed(std::uint64_t s) { init_seed_ = s; }

    ParamStore snapshot() const; // deep copy (fresh tensor ids)

    // flatten/unflatten in name order (theory module works on flat vectors)
    std::vector<double> flatten() const;
    void unflatten(const std::vector<double>& flat);

private:
    std::vector<std::string> names_;
    std::unordered_map<std::string, Tensor> tensors_;
    std::uint64_t init_seed_ = 0;
};

struct MlpConfig {
    int input_dim = 0;
    int hidden_dim = 0; // maximum width
    int num_layers = 0; // maximum depth
    int num_classes = 0;

    void validate() const;
};

struct TransformerConfig {
    int vocab_size = 0;
    int max_seq_len = 0;
    int d_model = 0;   // maximum width
    int num_layers = 0; // maximum depth
    int num_heads = 0;  // maximum heads; per-head size stays fixed under truncation
    int ffn_multiplier = 4;
    // Per-head size. 0 means d_model / num_heads; extracted sub-models carry
    // the parent's head size explicitly since their d_model shrank.
    int explicit_head_dim = 0;

    int head_dim() const { return explicit_head_dim > 0 ? explicit_head_dim : d_model / num_heads; }
    int ffn_dim() const { return ffn_multiplier * d_model; }
    void validate() const;
};

// ReLU MLP classifier with a shared classification layer. All hidden layers
// share one width dimension; depth truncation feeds the shared classifier
// from the last active layer.
class Mlp {
public:
    Mlp(MlpConfig cfg, const ManyInOneSpec& spec);

    static ParamStore init(const MlpConfig& cfg, std::uint64_t seed);
    const ModelLayout& layout() const { return layout_; }
    const MlpConfig& config() const { return cfg_; }
    const ManyInOneSpec& spec() const { return spec_; }

    // logits [batch, num_classes]; only parameters inside the view take part
    Tensor forward(const SubModelView& view, const Tensor& x) const;

    // forward with per-layer unit masks applied to the post-activation hidden
    // state (mask length = hidden_dim); evaluation path, no grad required
    Tensor forward_masked(const ParamStore& params, const Tensor& x,
                          const std::vector<std::vector<double>>& layer_masks) const;

private:
    MlpConfig cfg_;
    ManyInOneSpec spec_;
    ModelLayout layout_;
};

// Pre-norm decoder-only transformer with learned positional embeddings, a
// shared final norm and a shared classification head.
class TinyTransformer {
public:
    TinyTransformer(TransformerConfig cfg, const ManyInOneSpec& spec);

    static ParamStore init(const TransformerConfig& cfg, std::uint64_t seed);
    const ModelLayout& layout() const { return layout_; }
    const TransformerConfig& config() const { return cfg_; }
    const ManyInOneSpec& spec() const { return spec_; }

    // token_ids laid out [batch][seq]; logits [batch, seq, vocab]
    Tensor forward(const SubModelView& view, const std::vector<std::vector<int>>& token_ids) const;

private:
    TransformerConfig cfg_;
    ManyInOneSpec spec_;
    ModelLayout layout_;
};

ModelLayout mlp_layout(const MlpConfig& cfg, const ManyInOneSpec& spec);
ModelLayout transformer_layout(const TransformerConfig& cfg, const ManyInOneSpec& spec);

// Configs shrunk to the dimensions of a sub-model (standalone extraction).
MlpConfig mlp_subconfig(const MlpConfig& cfg, const ManyInOneSpec& spec, const SubModelIndex& idx);
TransformerConfig transformer_subconfig(const TransformerConfig& cfg, const ManyInOneSpec& spec,
                                        const SubModelIndex& idx);

} // namespace sortednet
