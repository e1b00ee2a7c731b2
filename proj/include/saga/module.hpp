#pragma once

#include <string>
#include <vector>

#include "saga/tensor.hpp"

namespace saga {

// Named view of a tensor owned by a module. Used by the optimizer, the
// checkpoint writer and the gradient checker.
struct ParamRef {
  std::string name;
  Tensor* tensor = nullptr;
};
using ParamList = std::vector<ParamRef>;

inline void append(ParamList& out, const ParamList& more) {
  out.insert(out.end(), more.begin(), more.end());
}

inline void set_requires_grad(const ParamList& params, bool flag) {
  for (const auto& p : params) p.tensor->set_requires_grad(flag);
}

}  // namespace saga
