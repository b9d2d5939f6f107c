#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "sortednet/rng.hpp"
#include "sortednet/tensor.hpp"

namespace sortednet {

// One sortable dimension: name, maximum index, support set and the sampling
// distribution over that support.
struct DimensionSpec {
    std::string name; // "depth", "width" or "heads"
    int max_index = 0;
    std::vector<int> support;          // strictly increasing, values in [1, max_index]
    std::vector<double> distribution;  // same length as support, sums to 1

    static DimensionSpec uniform(std::string name, int max_index, std::vector<int> support);
    static DimensionSpec range(std::string name, int max_index); // support {1..max_index}, uniform
};

// A concrete sub-model: one cut index per dimension, in spec order.
struct SubModelIndex {
    std::vector<int> b;

    bool operator==(const SubModelIndex& o) const { return b == o.b; }
    bool operator<(const SubModelIndex& o) const { return b < o.b; }
    // componentwise domination
    bool dominated_by(const SubModelIndex& o) const;
    std::string str() const; // e.g. "(3,16)"
};

class SubModelUniverse {
public:
    // returns true when the index was new
    bool observe(const SubModelIndex& idx) { return members_.insert(idx.b).second; }
    bool contains(const SubModelIndex& idx) const { return members_.count(idx.b) != 0; }
    std::size_t size() const { return members_.size(); }

private:
    std::set<std::vector<int>> members_;
};

class ManyInOneSpec {
public:
    ManyInOneSpec() = default;
    explicit ManyInOneSpec(std::vector<DimensionSpec> dims); // validates

    const std::vector<DimensionSpec>& dims() const { return dims_; }
    std::size_t num_dims() const { return dims_.size(); }
    int dim_index(const std::string& name) const; // -1 when absent

    SubModelIndex full_index() const;
    bool is_valid(const SubModelIndex& idx) const;
    std::int64_t grid_size() const; // product of support sizes

    // all indices on the support grid, lexicographic in dimension order
    std::vector<SubModelIndex> enumerate_grid() const;

    // all grid indices componentwise <= idx (idx itself included)
    std::vector<SubModelIndex> dominated_set(const SubModelIndex& idx) const;

    SubModelIndex sample(Rng& rng) const;

private:
    std::vector<DimensionSpec> dims_;
};

SubModelIndex sample_submodel(const ManyInOneSpec& spec, Rng& rng, SubModelUniverse* universe = nullptr);

// ---- layout & views -------------------------------------------------------

// Binds one tensor axis to a spec dimension: the active extent along `axis`
// is multiplier * b for cut index b.
struct AxisBinding {
    int axis = 0;
    int dim = 0; // index into ManyInOneSpec::dims()
    int multiplier = 1;
};

struct TensorBinding {
    std::string name;
    Shape full_shape;
    std::vector<AxisBinding> axes;
    int depth_dim = -1;  // when >= 0, tensor is active iff layer_index <= b[depth_dim]
    int layer_index = 0; // 1-based position along the depth dimension
    bool counts_macs = false; // true for weights applied as linear maps
};

struct ModelLayout {
    std::vector<TensorBinding> tensors;

    const TensorBinding* find(const std::string& name) const;
    // every spec dimension must cut at least one axis or gate at least one tensor
    void validate_against(const ManyInOneSpec& spec) const;
};

class ParamStore; // models.hpp

// Aliasing view over a ParamStore: which tensors are active and the active
// prefix extent per axis. Construction copies nothing.
struct TensorExtent {
    bool active = true;
    Shape shape; // active extents, same rank as the full tensor
};

class SubModelView {
public:
    SubModelView(const ParamStore& params, const ModelLayout& layout, SubModelIndex idx);

    const SubModelIndex& index() const { return idx_; }
    const ParamStore& params() const { return *params_; }
    bool active(const std::string& name) const;
    const Shape& extent(const std::string& name) const;

    // The stored parameter sliced to its active prefix. Recorded on the
    // active tape so gradients land in the prefix of the full tensor; when
    // the extent equals the full shape the parameter is returned as-is.
    Tensor fetch(const std::string& name) const;

    // flat indices of the active elements within the full tensor (for
    // subset/ordering checks); prefix blocks of a row-major tensor
    std::vector<std::int64_t> active_flat_indices(const std::string& name) const;

private:
    const ParamStore* params_;
    const ModelLayout* layout_;
    SubModelIndex idx_;
    std::vector<TensorExtent> extents_; // parallel to layout_->tensors
    int slot(const std::string& name) const;
};

SubModelView truncate(const ParamStore& params, const ModelLayout& layout, const SubModelIndex& idx);

struct SubModelCost {
    std::int64_t param_count = 0;
    std::int64_t mac_count = 0; // multiply-adds per input sample (or per token)
};

// Exact active-parameter count from the layout; MAC count is the sum over
// active 2-D tensors of their active element counts (each weight element is
// one multiply-add per sample), which matches both model families here.
SubModelCost submodel_cost(const ModelLayout& layout, const ManyInOneSpec& spec, const SubModelIndex& idx);

} // namespace sortednet
