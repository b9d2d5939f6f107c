#include "sortednet/sorted_config.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "sortednet/models.hpp"

namespace sortednet {

DimensionSpec DimensionSpec::uniform(std::string name, int max_index, std::vector<int> support) {
    DimensionSpec d;
    d.name = std::move(name);
    d.max_index = max_index;
    d.distribution.assign(support.size(), 1.0 / static_cast<double>(support.size()));
    d.support = std::move(support);
    return d;
}

DimensionSpec DimensionSpec::range(std::string name, int max_index) {
    std::vector<int> support(static_cast<std::size_t>(max_index));
    std::iota(support.begin(), support.end(), 1);
    return uniform(std::move(name), max_index, std::move(support));
}

bool SubModelIndex::dominated_by(const SubModelIndex& o) const {
    if (b.size() != o.b.size()) return false;
    for (std::size_t i = 0; i < b.size(); ++i) {
        if (b[i] > o.b[i]) return false;
    }
    return true;
}

std::string SubModelIndex::str() const {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < b.size(); ++i) {
        if (i) os << ',';
        os << b[i];
    }
    os << ')';
    return os.str();
}

ManyInOneSpec::ManyInOneSpec(std::vector<DimensionSpec> dims) : dims_(std::move(dims)) {
    for (const DimensionSpec& d : dims_) {
        if (d.max_index < 1) sn_fail("invalid_spec", "dimension " + d.name + ": max_index must be positive");
        if (d.support.empty()) sn_fail("invalid_spec", "dimension " + d.name + ": empty support");
        for (std::size_t i = 0; i < d.support.size(); ++i) {
            if (d.support[i] < 1 || d.support[i] > d.max_index) {
                sn_fail("invalid_spec", "dimension " + d.name + ": support value " + std::to_string(d.support[i]) +
                                            " outside [1," + std::to_string(d.max_index) + "]");
            }
            if (i > 0 && d.support[i] <= d.support[i - 1]) {
                sn_fail("invalid_spec", "dimension " + d.name + ": support not strictly increasing");
            }
        }
        if (d.support.back() != d.max_index) {
            sn_fail("invalid_spec", "dimension " + d.name + ": full model index " + std::to_string(d.max_index) +
                                        " missing from support");
        }
        if (d.distribution.size() != d.support.size()) {
            sn_fail("invalid_spec", "dimension " + d.name + ": distribution length mismatch");
        }
        double sum = 0.0;
        for (double p : d.distribution) {
            if (p < 0.0) sn_fail("invalid_spec", "dimension " + d.name + ": negative probability");
            sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-12) {
            sn_fail("invalid_spec", "dimension " + d.name + ": probabilities sum to " + std::to_string(sum));
        }
    }
}

int ManyInOneSpec::dim_index(const std::string& name) const {
    for (std::size_t i = 0; i < dims_.size(); ++i) {
        if (dims_[i].name == name) return static_cast<int>(i);
    }
    return -1;
}

SubModelIndex ManyInOneSpec::full_index() const {
    SubModelIndex idx;
    idx.b.reserve(dims_.size());
    for (const DimensionSpec& d : dims_) idx.b.push_back(d.max_index);
    return idx;
}

bool ManyInOneSpec::is_valid(const SubModelIndex& idx) const {
    if (idx.b.size() != dims_.size()) return false;
    for (std::size_t i = 0; i < dims_.size(); ++i) {
        const auto& sup = dims_[i].support;
        if (!std::binary_search(sup.begin(), sup.end(), idx.b[i])) return false;
    }
    return true;
}

std::int64_t ManyInOneSpec::grid_size() const {
    std::int64_t n = 1;
    for (const DimensionSpec& d : dims_) n *= static_cast<std::int64_t>(d.support.size());
    return n;
}

std::vector<SubModelIndex> ManyInOneSpec::enumerate_grid() const {
    std::vector<SubModelIndex> out;
    out.reserve(static_cast<std::size_t>(grid_size()));
    SubModelIndex cur;
    cur.b.assign(dims_.size(), 0);
    std::vector<std::size_t> pos(dims_.size(), 0);
    while (true) {
        for (std::size_t i = 0; i < dims_.size(); ++i) cur.b[i] = dims_[i].support[pos[i]];
        out.push_back(cur);
        std::size_t i = dims_.size();
        while (i > 0) {
            --i;
            if (++pos[i] < dims_[i].support.size()) break;
            pos[i] = 0;
            if (i == 0) return out;
        }
        if (dims_.empty()) return out;
    }
}

std::vector<SubModelIndex> ManyInOneSpec::dominated_set(const SubModelIndex& idx) const {
    if (!is_valid(idx)) sn_fail("invalid_index", "dominated_set: index " + idx.str() + " not on the support grid");
    std::vector<std::vector<int>> choices(dims_.size());
    for (std::size_t i = 0; i < dims_.size(); ++i) {
        for (int v : dims_[i].support) {
            if (v <= idx.b[i]) choices[i].push_back(v);
        }
    }
    std::vector<SubModelIndex> out;
    SubModelIndex cur;
    cur.b.assign(dims_.size(), 0);
    std::vector<std::size_t> pos(dims_.size(), 0);
    while (true) {
        for (std::size_t i = 0; i < dims_.size(); ++i) cur.b[i] = choices[i][pos[i]];
        out.push_back(cur);
        std::size_t i = dims_.size();
        bool done = true;
        while (i > 0) {
            --i;
            if (++pos[i] < choices[i].size()) {
                done = false;
                break;
            }
            pos[i] = 0;
        }
        if (done) return out;
    }
}

SubModelIndex ManyInOneSpec::sample(Rng& rng) const {
    SubModelIndex idx;
    idx.b.reserve(dims_.size());
    for (const DimensionSpec& d : dims_) {
        idx.b.push_back(d.support[static_cast<std::size_t>(rng.categorical(d.distribution))]);
    }
    return idx;
}

SubModelIndex sample_submodel(const ManyInOneSpec& spec, Rng& rng, SubModelUniverse* universe) {
    SubModelIndex idx = spec.sample(rng);
    if (universe != nullptr) universe->observe(idx);
    return idx;
}

// ---- layout & views ---------------------------------------------------------

const TensorBinding* ModelLayout::find(const std::string& name) const {
    for (const TensorBinding& t : tensors) {
        if (t.name == name) return &t;
    }
    return nullptr;
}

void ModelLayout::validate_against(const ManyInOneSpec& spec) const {
    for (std::size_t d = 0; d < spec.num_dims(); ++d) {
        bool bound = false;
        for (const TensorBinding& t : tensors) {
            if (t.depth_dim == static_cast<int>(d)) bound = true;
            for (const AxisBinding& a : t.axes) {
                if (a.dim == static_cast<int>(d)) bound = true;
            }
        }
        if (!bound) {
            sn_fail("invalid_layout", "dimension " + spec.dims()[d].name + " binds no tensor axis in the layout");
        }
    }
}

SubModelView::SubModelView(const ParamStore& params, const ModelLayout& layout, SubModelIndex idx)
    : params_(&params), layout_(&layout), idx_(std::move(idx)) {
    extents_.reserve(layout.tensors.size());
    for (const TensorBinding& t : layout.tensors) {
        TensorExtent e;
        e.shape = t.full_shape;
        if (t.depth_dim >= 0) {
            if (t.depth_dim >= static_cast<int>(idx_.b.size())) {
                sn_fail("invalid_index", "view: index " + idx_.str() + " has no entry for the depth dimension");
            }
            e.active = t.layer_index <= idx_.b[static_cast<std::size_t>(t.depth_dim)];
        }
        for (const AxisBinding& a : t.axes) {
            if (a.dim >= static_cast<int>(idx_.b.size())) {
                sn_fail("invalid_index", "view: index " + idx_.str() + " too short for layout bindings");
            }
            const int cut = a.multiplier * idx_.b[static_cast<std::size_t>(a.dim)];
            if (cut < 1 || cut > t.full_shape[static_cast<std::size_t>(a.axis)]) {
                sn_fail("invalid_index", "view: cut " + std::to_string(cut) + " outside axis of tensor " + t.name);
            }
            e.shape[static_cast<std::size_t>(a.axis)] = cut;
        }
        extents_.push_back(std::move(e));
    }
}

int SubModelView::slot(const std::string& name) const {
    for (std::size_t i = 0; i < layout_->tensors.size(); ++i) {
        if (layout_->tensors[i].name == name) return static_cast<int>(i);
    }
    sn_fail("unknown_tensor", "view: no tensor named " + name);
}

bool SubModelView::active(const std::string& name) const {
    return extents_[static_cast<std::size_t>(slot(name))].active;
}

const Shape& SubModelView::extent(const std::string& name) const {
    return extents_[static_cast<std::size_t>(slot(name))].shape;
}

Tensor SubModelView::fetch(const std::string& name) const {
    const int s = slot(name);
    const TensorExtent& e = extents_[static_cast<std::size_t>(s)];
    if (!e.active) sn_fail("inactive_tensor", "view: tensor " + name + " is not active for index " + idx_.str());
    const Tensor& full = params_->tensor(name);
    if (e.shape == full.shape()) return full;
    Tensor t = full;
    if (e.shape[0] != full.dim(0)) t = slice_rows(t, e.shape[0]);
    if (full.ndim() == 2 && e.shape[1] != full.dim(1)) t = slice_cols(t, e.shape[1]);
    return t;
}

std::vector<std::int64_t> SubModelView::active_flat_indices(const std::string& name) const {
    const int s = slot(name);
    const TensorExtent& e = extents_[static_cast<std::size_t>(s)];
    if (!e.active) return {};
    const TensorBinding& b = layout_->tensors[static_cast<std::size_t>(s)];
    std::vector<std::int64_t> out;
    const Shape& full = b.full_shape;
    std::vector<int> pos(full.size(), 0);
    while (true) {
        std::int64_t flat = 0;
        for (std::size_t i = 0; i < full.size(); ++i) flat = flat * full[i] + pos[i];
        out.push_back(flat);
        std::size_t i = full.size();
        bool done = true;
        while (i > 0) {
            --i;
            if (++pos[i] < e.shape[i]) {
                done = false;
                break;
            }
            pos[i] = 0;
        }
        if (done) return out;
    }
}

SubModelView truncate(const ParamStore& params, const ModelLayout& layout, const SubModelIndex& idx) {
    return SubModelView(params, layout, idx);
}

SubModelCost submodel_cost(const ModelLayout& layout, const ManyInOneSpec& spec, const SubModelIndex& idx) {
    if (!spec.is_valid(idx)) sn_fail("invalid_index", "submodel_cost: index " + idx.str() + " not on the support grid");
    SubModelCost cost;
    for (const TensorBinding& t : layout.tensors) {
        bool active = true;
        if (t.depth_dim >= 0) active = t.layer_index <= idx.b[static_cast<std::size_t>(t.depth_dim)];
        if (!active) continue;
        std::int64_t n = 1;
        Shape eff = t.full_shape;
        for (const AxisBinding& a : t.axes) {
            eff[static_cast<std::size_t>(a.axis)] = a.multiplier * idx.b[static_cast<std::size_t>(a.dim)];
        }
        for (int d : eff) n *= d;
        cost.param_count += n;
        if (t.counts_macs) cost.mac_count += n;
    }
    return cost;
}

} // namespace sortednet
