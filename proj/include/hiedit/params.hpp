#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "hiedit/autodiff.hpp"

namespace hiedit {

struct Param {
  ad::Shape shape;
  std::vector<double> value;

  std::size_t size() const { return value.size(); }
  bool operator==(const Param&) const = default;
};

// Insertion-ordered collection of named arrays. Order is part of the
// identity: checkpoints and optimizer states iterate in this order.
class ParamStore {
 public:
  Param& add(const std::string& name, ad::Shape shape, std::vector<double> values);
  Param& add_zeros(const std::string& name, ad::Shape shape);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  const std::vector<std::string>& names() const { return order_; }
  std::size_t size() const { return order_.size(); }
  std::size_t total_elements() const;

  // Zero-filled store with the same names and shapes.
  ParamStore zeros_like() const;

  bool operator==(const ParamStore& o) const { return order_ == o.order_ && params_ == o.params_; }

 private:
  std::vector<std::string> order_;
  std::map<std::string, Param> params_;
  std::map<std::string, std::size_t> index_;
};

// Tape handles for every entry of a ParamStore.
class BoundParams {
 public:
  BoundParams() = default;
  BoundParams(ad::Tape& tape, const ParamStore& store, bool trainable);

  const ad::Tensor& operator[](const std::string& name) const;
  std::vector<ad::Tensor> tensors() const;
  const std::vector<std::string>& names() const { return names_; }

  // Adds factor × the tape gradient of every bound tensor into `grads`.
  void accumulate_into(ParamStore& grads, const ad::GradientMap& g, double factor = 1.0) const;

 private:
  std::vector<std::string> names_;
  std::map<std::string, ad::Tensor> tensors_;
};

}  // namespace hiedit
