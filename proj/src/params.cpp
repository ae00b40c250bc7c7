#include "hiedit/params.hpp"

#include "hiedit/error.hpp"

namespace hiedit {

Param& ParamStore::add(const std::string& name, ad::Shape shape, std::vector<double> values) {
  if (contains(name)) throw ArgumentError("parameter '" + name + "' already exists");
  if (ad::shape_size(shape) != values.size())
    throw DimensionError("parameter '" + name + "': shape " + ad::shape_str(shape) +
                         " does not match value count");
  index_[name] = order_.size();
  order_.push_back(name);
  auto& p = params_[name];
  p.shape = std::move(shape);
  p.value = std::move(values);
  return p;
}

Param& ParamStore::add_zeros(const std::string& name, ad::Shape shape) {
  const std::size_t n = ad::shape_size(shape);
  return add(name, std::move(shape), std::vector<double>(n, 0.0));
}

Param& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ArgumentError("unknown parameter '" + name + "'");
  return it->second;
}

const Param& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ArgumentError("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += p.size();
  return n;
}

ParamStore ParamStore::zeros_like() const {
  ParamStore out;
  for (const auto& name : order_) out.add_zeros(name, at(name).shape);
  return out;
}

BoundParams::BoundParams(ad::Tape& tape, const ParamStore& store, bool trainable) {
  for (const auto& name : store.names()) {
    const auto& p = store.at(name);
    names_.push_back(name);
    tensors_[name] = trainable ? tape.variable(p.shape, p.value) : tape.constant(p.shape, p.value);
  }
}

const ad::Tensor& BoundParams::operator[](const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ArgumentError("parameter '" + name + "' is not bound");
  return it->second;
}

std::vector<ad::Tensor> BoundParams::tensors() const {
  std::vector<ad::Tensor> out;
  out.reserve(names_.size());
  for (const auto& n : names_) out.push_back(tensors_.at(n));
  return out;
}

void BoundParams::accumulate_into(ParamStore& grads, const ad::GradientMap& g, double factor) const {
  for (const auto& name : names_) {
    auto it = g.find(tensors_.at(name).id());
    if (it == g.end()) continue;
    auto& dst = grads.at(name).value;
    if (dst.size() != it->second.size()) throw DimensionError("gradient size mismatch for '" + name + "'");
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += factor * it->second[i];
  }
}

}  // namespace hiedit
