#include "weakvoc/params.hpp"

namespace weakvoc {

void ParameterSet::add(std::string name, Tensor value, bool trainable) {
  if (contains(name)) throw ValidationError("duplicate parameter '" + name + "'");
  index_[name] = entries_.size();
  entries_.push_back({std::move(name), std::move(value), trainable});
}

Tensor& ParameterSet::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("unknown parameter '" + name + "'");
  return entries_[it->second].value;
}

const Tensor& ParameterSet::at(const std::string& name) const {
  return const_cast<ParameterSet&>(*this).at(name);
}

Index ParameterSet::numel() const {
  Index n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

bool operator==(const ParameterSet& a, const ParameterSet& b) {
  if (a.entries_.size() != b.entries_.size()) return false;
  for (std::size_t i = 0; i < a.entries_.size(); ++i) {
    const auto& x = a.entries_[i];
    const auto& y = b.entries_[i];
    if (x.name != y.name || x.trainable != y.trainable || !(x.value == y.value)) return false;
  }
  return true;
}

BoundParameters::BoundParameters(ad::Tape& tape, const ParameterSet& params, bool track_grads)
    : tape_(&tape), params_(&params) {
  for (const auto& e : params.entries()) vars_[e.name] = tape.leaf(e.value, track_grads && e.trainable);
}

ad::Var BoundParameters::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ValidationError("parameter '" + name + "' is not bound");
  return it->second;
}

std::vector<Tensor> BoundParameters::gradients() const {
  std::vector<Tensor> out;
  for (const auto& e : params_->entries()) out.push_back(tape_->grad(vars_.at(e.name)));
  return out;
}

}  // namespace weakvoc
