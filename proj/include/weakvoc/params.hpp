#ifndef WEAKVOC_PARAMS_HPP
#define WEAKVOC_PARAMS_HPP

#include <map>
#include <string>
#include <vector>

#include "weakvoc/autodiff.hpp"

namespace weakvoc {

/// Named parameter tensors kept in insertion order (the checkpoint order).
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    bool trainable = true;
  };

  void add(std::string name, Tensor value, bool trainable = true);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }
  Index numel() const;

  friend bool operator==(const ParameterSet& a, const ParameterSet& b);

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Parameters registered as leaves of one tape.
class BoundParameters {
 public:
  BoundParameters(ad::Tape& tape, const ParameterSet& params, bool track_grads);

  ad::Var operator[](const std::string& name) const;
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }
  /// Collects gradients after tape.backward(), in parameter order.
  std::vector<Tensor> gradients() const;

 private:
  ad::Tape* tape_;
  const ParameterSet* params_;
  std::map<std::string, ad::Var> vars_;
};

}  // namespace weakvoc

#endif  // WEAKVOC_PARAMS_HPP
