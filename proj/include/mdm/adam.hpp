#ifndef MDM_ADAM_HPP
#define MDM_ADAM_HPP

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mdm/error.hpp"
#include "mdm/tensor.hpp"

namespace mdm {

// Adam with bias correction. One state instance owns the moment buffers for
// a fixed group of parameters; step() advances the shared counter by one.
class AdamState {
 public:
  explicit AdamState(double learning_rate, double beta1 = 0.9,
                     double beta2 = 0.999, double epsilon = 1e-8)
      : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(epsilon) {
    check_value(lr_ > 0.0, "adam: learning rate must be positive");
  }

  // registration order defines the parameter order expected by step()
  void register_param(const Shape& shape) {
    slots_.push_back({Tensor::zeros(shape), Tensor::zeros(shape)});
  }

  std::size_t param_count() const { return slots_.size(); }
  long step_count() const { return step_; }
  double learning_rate() const { return lr_; }

  void step(const std::vector<Tensor*>& params,
            const std::vector<const Tensor*>& grads) {
    check_shape(params.size() == slots_.size() &&
                            grads.size() == slots_.size(),
                        "adam: parameter group size mismatch");
    ++step_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (std::size_t p = 0; p < slots_.size(); ++p) {
      Tensor& x = *params[p];
      const Tensor& g = *grads[p];
      Slot& s = slots_[p];
      check_shape(x.same_shape(s.m) && g.same_shape(s.m),
                          "adam: shape mismatch at parameter " +
                              std::to_string(p));
      for (std::size_t i = 0; i < x.size(); ++i) {
        s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g[i];
        s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g[i] * g[i];
        const double mhat = s.m[i] / c1;
        const double vhat = s.v[i] / c2;
        x[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  // single-parameter convenience
  void step(Tensor& param, const Tensor& grad) {
    step(std::vector<Tensor*>{&param}, std::vector<const Tensor*>{&grad});
  }

 private:
  struct Slot {
    Tensor m, v;
  };

  std::vector<Slot> slots_;
  long step_ = 0;
  double lr_, beta1_, beta2_, eps_;
};

}  // namespace mdm

#endif  // MDM_ADAM_HPP
