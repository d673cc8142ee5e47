#pragma once

// Central finite-difference verification of autodiff gradients. Used by the
// `gradcheck` CLI subcommand and by the test suites. Loss builders must
// rebuild the graph from the given leaves on every call.

#include <functional>
#include <string>
#include <vector>

#include "ehm/tensor.hpp"

namespace ehm {

template <class S>
struct GradCheckItem {
  std::string name;
  S max_rel_err = S(0);
  S worst_analytic = S(0);
  S worst_numeric = S(0);
  bool pass = true;
};

template <class S>
struct GradCheckReport {
  std::vector<GradCheckItem<S>> items;
  bool pass = true;

  void add(GradCheckItem<S> item) {
    pass = pass && item.pass;
    items.push_back(std::move(item));
  }
};

// Checks d(loss)/d(param) for every element of every parameter against a
// central difference. Relative error uses max(|a|,|n|,denom_floor).
template <class S>
GradCheckItem<S> check_gradients(const std::string& name,
                                 std::vector<Tensor<S>> params,
                                 const std::function<Tensor<S>()>& loss_fn,
                                 S step = S(1e-4), S tol = S(1e-3),
                                 S denom_floor = S(1e-6)) {
  GradCheckItem<S> item;
  item.name = name;
  for (auto& p : params) p.zero_grad();
  Tensor<S> loss = loss_fn();
  loss.backward();
  std::vector<std::vector<S>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.grad());

  NoGradGuard ng;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    for (size_t i = 0; i < p.val().size(); ++i) {
      const S orig = p.val()[i];
      p.val()[i] = orig + step;
      const S up = loss_fn().item();
      p.val()[i] = orig - step;
      const S dn = loss_fn().item();
      p.val()[i] = orig;
      const S numeric = (up - dn) / (S(2) * step);
      const S a = analytic[pi][i];
      const S denom = std::max({std::abs(a), std::abs(numeric), denom_floor});
      const S rel = std::abs(a - numeric) / denom;
      if (rel > item.max_rel_err) {
        item.max_rel_err = rel;
        item.worst_analytic = a;
        item.worst_numeric = numeric;
      }
    }
  }
  item.pass = item.max_rel_err <= tol;
  return item;
}

}  // namespace ehm
