#ifndef MDM_TAPE_HPP
#define MDM_TAPE_HPP

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mdm/error.hpp"
#include "mdm/tensor.hpp"

namespace mdm {

// axis-aligned cell rectangle on an H x W grid
struct Rect {
  std::size_t y0 = 0, x0 = 0, h = 0, w = 0;
  std::size_t cells() const { return h * w; }
};

namespace detail {

// Shared dense kernels. The Tape ops and the plain (gradient-free) forward
// path both call these, so the two routes cannot drift apart numerically.

inline void conv2d_shape_check(const Tensor& x, const Tensor& k, int stride,
                               int pad) {
  check_shape(x.rank() == 3, "conv2d: input must be [C,H,W], got " +
                                 shape_str(x.shape()));
  check_shape(k.rank() == 4, "conv2d: kernels must be [Cout,Cin,k,k], got " +
                                 shape_str(k.shape()));
  check_shape(k.shape()[1] == x.shape()[0],
              "conv2d: kernel Cin " + std::to_string(k.shape()[1]) +
                  " != input C " + std::to_string(x.shape()[0]));
  check_value(stride >= 1, "conv2d: stride must be >= 1");
  check_value(pad >= 0, "conv2d: padding must be >= 0");
  const std::size_t kh = k.shape()[2], kw = k.shape()[3];
  check_shape(kh <= x.shape()[1] + 2 * static_cast<std::size_t>(pad) &&
                  kw <= x.shape()[2] + 2 * static_cast<std::size_t>(pad),
              "conv2d: kernel larger than padded input");
}

inline Shape conv2d_out_shape(const Tensor& x, const Tensor& k, int stride,
                              int pad) {
  const std::size_t ho =
      (x.shape()[1] + 2 * pad - k.shape()[2]) / stride + 1;
  const std::size_t wo =
      (x.shape()[2] + 2 * pad - k.shape()[3]) / stride + 1;
  return {k.shape()[0], ho, wo};
}

inline void conv2d_forward(const Tensor& x, const Tensor& k, int stride,
                           int pad, Tensor& out) {
  const std::size_t cin = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const std::size_t cout = k.shape()[0], kh = k.shape()[2], kw = k.shape()[3];
  const std::size_t ho = out.shape()[1], wo = out.shape()[2];
  for (std::size_t oc = 0; oc < cout; ++oc) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double acc = 0.0;
        for (std::size_t ic = 0; ic < cin; ++ic) {
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const long iy = static_cast<long>(oy) * stride + ky - pad;
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const long ix = static_cast<long>(ox) * stride + kx - pad;
              if (ix < 0 || ix >= static_cast<long>(w)) continue;
              acc += x.at(ic, iy, ix) * k.at(oc, ic, ky, kx);
            }
          }
        }
        out.at(oc, oy, ox) = acc;
      }
    }
  }
}

inline void conv2d_backward(const Tensor& x, const Tensor& k, int stride,
                            int pad, const Tensor& gout, Tensor* gx,
                            Tensor* gk) {
  const std::size_t cin = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const std::size_t cout = k.shape()[0], kh = k.shape()[2], kw = k.shape()[3];
  const std::size_t ho = gout.shape()[1], wo = gout.shape()[2];
  for (std::size_t oc = 0; oc < cout; ++oc) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const double g = gout.at(oc, oy, ox);
        if (g == 0.0) continue;
        for (std::size_t ic = 0; ic < cin; ++ic) {
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const long iy = static_cast<long>(oy) * stride + ky - pad;
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const long ix = static_cast<long>(ox) * stride + kx - pad;
              if (ix < 0 || ix >= static_cast<long>(w)) continue;
              if (gx) gx->at(ic, iy, ix) += k.at(oc, ic, ky, kx) * g;
              if (gk) gk->at(oc, ic, ky, kx) += x.at(ic, iy, ix) * g;
            }
          }
        }
      }
    }
  }
}

// one axis of the half-pixel-center bilinear map:
// src coordinate = (i + 0.5) * src / dst - 0.5, clamped to [0, src-1]
struct LinearAxis {
  std::vector<std::size_t> lo, hi;
  std::vector<double> t;  // weight of hi; value = (1-t)*s[lo] + t*s[hi]
};

inline LinearAxis bilinear_axis(std::size_t src, std::size_t dst) {
  LinearAxis ax;
  ax.lo.resize(dst);
  ax.hi.resize(dst);
  ax.t.resize(dst);
  for (std::size_t i = 0; i < dst; ++i) {
    double c = (static_cast<double>(i) + 0.5) * static_cast<double>(src) /
                   static_cast<double>(dst) -
               0.5;
    if (c < 0.0) c = 0.0;
    const double maxc = static_cast<double>(src - 1);
    if (c > maxc) c = maxc;
    const std::size_t lo = static_cast<std::size_t>(c);
    ax.lo[i] = lo;
    ax.hi[i] = std::min(lo + 1, src - 1);
    ax.t[i] = c - static_cast<double>(lo);
  }
  return ax;
}

inline void bilinear_forward(const Tensor& d, const LinearAxis& ay,
                             const LinearAxis& ax, Tensor& out) {
  const std::size_t ho = out.shape()[0], wo = out.shape()[1];
  for (std::size_t y = 0; y < ho; ++y) {
    const std::size_t y0 = ay.lo[y], y1 = ay.hi[y];
    const double ty = ay.t[y];
    for (std::size_t x = 0; x < wo; ++x) {
      const std::size_t x0 = ax.lo[x], x1 = ax.hi[x];
      const double tx = ax.t[x];
      out.at(y, x) = (1.0 - ty) * ((1.0 - tx) * d.at(y0, x0) + tx * d.at(y0, x1)) +
                     ty * ((1.0 - tx) * d.at(y1, x0) + tx * d.at(y1, x1));
    }
  }
}

inline void validate_partition(const std::vector<Rect>& regions,
                               std::size_t h, std::size_t w) {
  std::vector<char> seen(h * w, 0);
  for (const Rect& r : regions) {
    check_shape(r.h > 0 && r.w > 0 && r.y0 + r.h <= h && r.x0 + r.w <= w,
                "region rectangle out of bounds");
    for (std::size_t y = r.y0; y < r.y0 + r.h; ++y) {
      for (std::size_t x = r.x0; x < r.x0 + r.w; ++x) {
        check_value(!seen[y * w + x], "regions overlap");
        seen[y * w + x] = 1;
      }
    }
  }
  for (char c : seen) check_value(c == 1, "regions do not cover the grid");
}

}  // namespace detail

// Handle to a node recorded on a Tape.
struct Var {
  std::size_t idx = static_cast<std::size_t>(-1);
};

// Define-by-run reverse-mode autodiff session. Records a fresh graph per
// use; backward may run once, after which the session is consumed.
// Single-owner: do not share one Tape across threads.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false) {
    value.ensure_finite("leaf");
    return push(std::move(value), requires_grad, {}, nullptr);
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var constant(double v) { return leaf(Tensor::scalar(v), false); }

  const Tensor& value(Var v) const { return node(v).value; }

  const Tensor& grad(Var v) const {
    const Node& n = node(v);
    if (!backward_run_) throw SessionError("grad requested before backward");
    if (!n.needs_grad) {
      throw SessionError("grad requested for a node outside the grad graph");
    }
    return n.grad;
  }

  std::size_t node_count() const { return nodes_.size(); }

  // ---- elementwise (exact shape or scalar broadcast) ----

  Var add(Var a, Var b) {
    return binary(a, b, "add",
                  [](double x, double y) { return x + y; },
                  [](double, double, double g, double& ga, double& gb) {
                    ga += g;
                    gb += g;
                  });
  }

  Var sub(Var a, Var b) {
    return binary(a, b, "sub",
                  [](double x, double y) { return x - y; },
                  [](double, double, double g, double& ga, double& gb) {
                    ga += g;
                    gb -= g;
                  });
  }

  Var mul(Var a, Var b) {
    return binary(a, b, "mul",
                  [](double x, double y) { return x * y; },
                  [](double x, double y, double g, double& ga, double& gb) {
                    ga += g * y;
                    gb += g * x;
                  });
  }

  Var scale(Var a, double c) {
    return unary(a, [c](double x) { return c * x; },
                 [c](double, double g) { return c * g; });
  }

  Var relu(Var a) {
    return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                 [](double x, double g) { return x > 0.0 ? g : 0.0; });
  }

  // clamp to [0,1]; gradient passes on the closed interval so cells parked
  // exactly at a bound stay reachable
  Var clamp01(Var a) {
    return unary(a,
                 [](double x) { return x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x); },
                 [](double x, double g) {
                   return (x >= 0.0 && x <= 1.0) ? g : 0.0;
                 });
  }

  // x^q for x >= 0; subgradient at 0 is 0 for q > 1
  Var pow_const(Var a, double q) {
    for (double v : value(a).data()) {
      check_value(v >= 0.0, "pow_const: negative base");
    }
    return unary(a, [q](double x) { return std::pow(x, q); },
                 [q](double x, double g) {
                   if (x == 0.0) return q == 1.0 ? g : 0.0;
                   return g * q * std::pow(x, q - 1.0);
                 });
  }

  // ---- reductions & losses ----

  Var sum(Var a) {
    const Tensor& x = value(a);
    Tensor out = Tensor::scalar(x.sum());
    return record(std::move(out), {a}, [](Tape& t, std::size_t self) {
      const Node& n = t.nodes_[self];
      const double g = n.grad[0];
      t.add_grad(n.parents[0], [g](Tensor& dst) {
        for (double& v : dst.data()) v += g;
      });
    });
  }

  // sum of squared differences, grad 2(a-b) to a and -2(a-b) to b
  Var sq_l2(Var a, Var b) {
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    check_shape(x.same_shape(y), "sq_l2: shape mismatch " +
                                             shape_str(x.shape()) + " vs " +
                                             shape_str(y.shape()));
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = x[i] - y[i];
      acc += d * d;
    }
    return record(Tensor::scalar(acc), {a, b}, [](Tape& t, std::size_t self) {
      const Node& n = t.nodes_[self];
      const double g = n.grad[0];
      const Tensor& x = t.nodes_[n.parents[0]].value;
      const Tensor& y = t.nodes_[n.parents[1]].value;
      t.add_grad(n.parents[0], [&](Tensor& dst) {
        for (std::size_t i = 0; i < dst.size(); ++i) {
          dst[i] += 2.0 * g * (x[i] - y[i]);
        }
      });
      t.add_grad(n.parents[1], [&](Tensor& dst) {
        for (std::size_t i = 0; i < dst.size(); ++i) {
          dst[i] -= 2.0 * g * (x[i] - y[i]);
        }
      });
    });
  }

  // mean absolute value; subgradient of |x| at 0 taken as 0
  Var l1_mean(Var a) {
    const Tensor& x = value(a);
    check_value(x.size() > 0, "l1_mean: empty tensor");
    double acc = 0.0;
    for (double v : x.data()) acc += std::fabs(v);
    const double n = static_cast<double>(x.size());
    return record(Tensor::scalar(acc / n), {a},
                  [n](Tape& t, std::size_t self) {
                    const Node& nd = t.nodes_[self];
                    const double g = nd.grad[0] / n;
                    const Tensor& x = t.nodes_[nd.parents[0]].value;
                    t.add_grad(nd.parents[0], [&, g](Tensor& dst) {
                      for (std::size_t i = 0; i < dst.size(); ++i) {
                        if (x[i] > 0.0) {
                          dst[i] += g;
                        } else if (x[i] < 0.0) {
                          dst[i] -= g;
                        }
                      }
                    });
                  });
  }

  // -log softmax(logits)[label], stabilized by max subtraction
  Var softmax_cross_entropy(Var logits, std::size_t label) {
    const Tensor& l = value(logits);
    check_value(label < l.size(), "softmax_cross_entropy: label " +
                                      std::to_string(label) +
                                      " out of range for K=" +
                                      std::to_string(l.size()));
    l.ensure_finite("softmax_cross_entropy logits");
    const double m = l.max_value();
    double z = 0.0;
    for (double v : l.data()) z += std::exp(v - m);
    const double loss = std::log(z) - (l[label] - m);
    return record(Tensor::scalar(loss), {logits},
                  [label](Tape& t, std::size_t self) {
                    const Node& n = t.nodes_[self];
                    const double g = n.grad[0];
                    const Tensor p = softmax(t.nodes_[n.parents[0]].value);
                    t.add_grad(n.parents[0], [&, g](Tensor& dst) {
                      for (std::size_t i = 0; i < dst.size(); ++i) {
                        dst[i] += g * (p[i] - (i == label ? 1.0 : 0.0));
                      }
                    });
                  });
  }

  // ---- linear algebra / network layers ----

  // W[m,n] times flattened x (size n)
  Var matvec(Var wvar, Var xvar) {
    const Tensor& w = value(wvar);
    const Tensor& x = value(xvar);
    check_shape(w.rank() == 2, "matvec: W must be rank 2");
    check_shape(w.shape()[1] == x.size(),
                        "matvec: W columns " + std::to_string(w.shape()[1]) +
                            " != x size " + std::to_string(x.size()));
    const std::size_t m = w.shape()[0], n = w.shape()[1];
    Tensor out({m});
    for (std::size_t i = 0; i < m; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += w.at(i, j) * x[j];
      out[i] = acc;
    }
    return record(std::move(out), {wvar, xvar},
                  [m, n](Tape& t, std::size_t self) {
                    const Node& nd = t.nodes_[self];
                    const Tensor& g = nd.grad;
                    const Tensor& w = t.nodes_[nd.parents[0]].value;
                    const Tensor& x = t.nodes_[nd.parents[1]].value;
                    t.add_grad(nd.parents[0], [&](Tensor& dst) {
                      for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t j = 0; j < n; ++j) {
                          dst.at(i, j) += g[i] * x[j];
                        }
                      }
                    });
                    t.add_grad(nd.parents[1], [&](Tensor& dst) {
                      for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t j = 0; j < n; ++j) {
                          dst[j] += w.at(i, j) * g[i];
                        }
                      }
                    });
                  });
  }

  Var conv2d(Var xvar, Var kvar, int stride = 1, int padding = 0) {
    const Tensor& x = value(xvar);
    const Tensor& k = value(kvar);
    detail::conv2d_shape_check(x, k, stride, padding);
    Tensor out(detail::conv2d_out_shape(x, k, stride, padding));
    detail::conv2d_forward(x, k, stride, padding, out);
    return record(std::move(out), {xvar, kvar},
                  [stride, padding](Tape& t, std::size_t self) {
                    const Node& nd = t.nodes_[self];
                    const Tensor& x = t.nodes_[nd.parents[0]].value;
                    const Tensor& k = t.nodes_[nd.parents[1]].value;
                    Tensor* gx = t.grad_ptr(nd.parents[0]);
                    Tensor* gk = t.grad_ptr(nd.parents[1]);
                    detail::conv2d_backward(x, k, stride, padding, nd.grad, gx,
                                            gk);
                  });
  }

  Var avg_pool2d(Var xvar, int window, int stride = 0) {
    if (stride == 0) stride = window;
    const Tensor& x = value(xvar);
    check_shape(x.rank() == 3, "avg_pool2d: input must be [C,H,W]");
    check_value(window >= 1 && stride >= 1, "avg_pool2d: bad window/stride");
    const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    check_shape(static_cast<std::size_t>(window) <= h &&
                            static_cast<std::size_t>(window) <= w,
                        "avg_pool2d: window exceeds input");
    const std::size_t ho = (h - window) / stride + 1;
    const std::size_t wo = (w - window) / stride + 1;
    Tensor out({c, ho, wo});
    const double inv = 1.0 / (static_cast<double>(window) * window);
    for (std::size_t ci = 0; ci < c; ++ci) {
      for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double acc = 0.0;
          for (int ky = 0; ky < window; ++ky) {
            for (int kx = 0; kx < window; ++kx) {
              acc += x.at(ci, oy * stride + ky, ox * stride + kx);
            }
          }
          out.at(ci, oy, ox) = acc * inv;
        }
      }
    }
    return record(std::move(out), {xvar},
                  [window, stride, inv](Tape& t, std::size_t self) {
                    const Node& nd = t.nodes_[self];
                    const Tensor& g = nd.grad;
                    const std::size_t c = g.shape()[0], ho = g.shape()[1],
                                      wo = g.shape()[2];
                    t.add_grad(nd.parents[0], [&](Tensor& dst) {
                      for (std::size_t ci = 0; ci < c; ++ci) {
                        for (std::size_t oy = 0; oy < ho; ++oy) {
                          for (std::size_t ox = 0; ox < wo; ++ox) {
                            const double gv = g.at(ci, oy, ox) * inv;
                            for (int ky = 0; ky < window; ++ky) {
                              for (int kx = 0; kx < window; ++kx) {
                                dst.at(ci, oy * stride + ky,
                                       ox * stride + kx) += gv;
                              }
                            }
                          }
                        }
                      }
                    });
                  });
  }

  Var global_avg_pool(Var xvar) {
    const Tensor& x = value(xvar);
    check_shape(x.rank() == 3, "global_avg_pool: input must be [C,H,W]");
    const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    const double inv = 1.0 / static_cast<double>(h * w);
    Tensor out({c});
    for (std::size_t ci = 0; ci < c; ++ci) {
      double acc = 0.0;
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x2 = 0; x2 < w; ++x2) acc += x.at(ci, y, x2);
      }
      out[ci] = acc * inv;
    }
    return record(std::move(out), {xvar}, [inv](Tape& t, std::size_t self) {
      const Node& nd = t.nodes_[self];
      const Tensor& g = nd.grad;
      t.add_grad(nd.parents[0], [&](Tensor& dst) {
        const std::size_t c = dst.shape()[0], h = dst.shape()[1],
                          w = dst.shape()[2];
        for (std::size_t ci = 0; ci < c; ++ci) {
          const double gv = g[ci] * inv;
          for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x2 = 0; x2 < w; ++x2) dst.at(ci, y, x2) += gv;
          }
        }
      });
    });
  }

  // half-pixel-center bilinear upsample of a 2-d grid; gradient is the
  // transpose of the interpolation weights
  Var bilinear_upsample(Var dvar, std::size_t out_h, std::size_t out_w) {
    const Tensor& d = value(dvar);
    check_shape(d.rank() == 2, "bilinear_upsample: source must be 2-d");
    const std::size_t a = d.shape()[0], b = d.shape()[1];
    check_value(out_h >= a && out_w >= b,
                "bilinear_upsample: target " + std::to_string(out_h) + "x" +
                    std::to_string(out_w) + " smaller than source " +
                    shape_str(d.shape()));
    detail::LinearAxis ay = detail::bilinear_axis(a, out_h);
    detail::LinearAxis ax = detail::bilinear_axis(b, out_w);
    Tensor out({out_h, out_w});
    detail::bilinear_forward(d, ay, ax, out);
    return record(
        std::move(out), {dvar},
        [ay = std::move(ay), ax = std::move(ax)](Tape& t, std::size_t self) {
          const Node& nd = t.nodes_[self];
          const Tensor& g = nd.grad;
          t.add_grad(nd.parents[0], [&](Tensor& dst) {
            const std::size_t ho = g.shape()[0], wo = g.shape()[1];
            for (std::size_t y = 0; y < ho; ++y) {
              const std::size_t y0 = ay.lo[y], y1 = ay.hi[y];
              const double ty = ay.t[y];
              for (std::size_t x = 0; x < wo; ++x) {
                const std::size_t x0 = ax.lo[x], x1 = ax.hi[x];
                const double tx = ax.t[x];
                const double gv = g.at(y, x);
                dst.at(y0, x0) += gv * (1.0 - ty) * (1.0 - tx);
                dst.at(y0, x1) += gv * (1.0 - ty) * tx;
                dst.at(y1, x0) += gv * ty * (1.0 - tx);
                dst.at(y1, x1) += gv * ty * tx;
              }
            }
          });
        });
  }

  // multiply an [H,W] mask into every channel of a [C,H,W] image
  Var apply_mask(Var xvar, Var mvar) {
    const Tensor& x = value(xvar);
    const Tensor& m = value(mvar);
    check_shape(x.rank() == 3 && m.rank() == 2 &&
                            x.shape()[1] == m.shape()[0] &&
                            x.shape()[2] == m.shape()[1],
                        "apply_mask: image " + shape_str(x.shape()) +
                            " vs mask " + shape_str(m.shape()));
    const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    Tensor out(x.shape());
    for (std::size_t ci = 0; ci < c; ++ci) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x2 = 0; x2 < w; ++x2) {
          out.at(ci, y, x2) = x.at(ci, y, x2) * m.at(y, x2);
        }
      }
    }
    return record(std::move(out), {xvar, mvar},
                  [](Tape& t, std::size_t self) {
                    const Node& nd = t.nodes_[self];
                    const Tensor& g = nd.grad;
                    const Tensor& x = t.nodes_[nd.parents[0]].value;
                    const Tensor& m = t.nodes_[nd.parents[1]].value;
                    const std::size_t c = x.shape()[0], h = x.shape()[1],
                                      w = x.shape()[2];
                    t.add_grad(nd.parents[0], [&](Tensor& dst) {
                      for (std::size_t ci = 0; ci < c; ++ci) {
                        for (std::size_t y = 0; y < h; ++y) {
                          for (std::size_t x2 = 0; x2 < w; ++x2) {
                            dst.at(ci, y, x2) += g.at(ci, y, x2) * m.at(y, x2);
                          }
                        }
                      }
                    });
                    t.add_grad(nd.parents[1], [&](Tensor& dst) {
                      for (std::size_t ci = 0; ci < c; ++ci) {
                        for (std::size_t y = 0; y < h; ++y) {
                          for (std::size_t x2 = 0; x2 < w; ++x2) {
                            dst.at(y, x2) += g.at(ci, y, x2) * x.at(ci, y, x2);
                          }
                        }
                      }
                    });
                  });
  }

  // per-region mean values of an [H,W] grid under a rectangle partition
  Var region_means(Var mvar, const std::vector<Rect>& regions) {
    const Tensor& m = value(mvar);
    check_shape(m.rank() == 2, "region_means: input must be 2-d");
    detail::validate_partition(regions, m.shape()[0], m.shape()[1]);
    Tensor out({regions.size()});
    for (std::size_t r = 0; r < regions.size(); ++r) {
      const Rect& rc = regions[r];
      double acc = 0.0;
      for (std::size_t y = rc.y0; y < rc.y0 + rc.h; ++y) {
        for (std::size_t x = rc.x0; x < rc.x0 + rc.w; ++x) acc += m.at(y, x);
      }
      out[r] = acc / static_cast<double>(rc.cells());
    }
    return record(std::move(out), {mvar},
                  [regions](Tape& t, std::size_t self) {
                    const Node& nd = t.nodes_[self];
                    const Tensor& g = nd.grad;
                    t.add_grad(nd.parents[0], [&](Tensor& dst) {
                      for (std::size_t r = 0; r < regions.size(); ++r) {
                        const Rect& rc = regions[r];
                        const double gv =
                            g[r] / static_cast<double>(rc.cells());
                        for (std::size_t y = rc.y0; y < rc.y0 + rc.h; ++y) {
                          for (std::size_t x = rc.x0; x < rc.x0 + rc.w; ++x) {
                            dst.at(y, x) += gv;
                          }
                        }
                      }
                    });
                  });
  }

  // same data, new extents; gradient passes through unchanged
  Var reshape(Var a, Shape shape) {
    const Tensor& x = value(a);
    check_shape(shape_size(shape) == x.size(),
                "reshape: size mismatch " + shape_str(x.shape()) + " -> " +
                    shape_str(shape));
    Tensor out(std::move(shape), x.data());
    return record(std::move(out), {a}, [](Tape& t, std::size_t self) {
      const Node& nd = t.nodes_[self];
      const Tensor& g = nd.grad;
      t.add_grad(nd.parents[0], [&](Tensor& dst) {
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
      });
    });
  }

  // single element as a scalar node (flat index)
  Var select_index(Var a, std::size_t index) {
    const Tensor& x = value(a);
    check_value(index < x.size(), "select_index: index " +
                                      std::to_string(index) +
                                      " out of range for size " +
                                      std::to_string(x.size()));
    return record(Tensor::scalar(x[index]), {a},
                  [index](Tape& t, std::size_t self) {
                    const Node& nd = t.nodes_[self];
                    const double g = nd.grad[0];
                    t.add_grad(nd.parents[0],
                               [index, g](Tensor& dst) { dst[index] += g; });
                  });
  }

  // ---- reverse sweep ----

  // Populates gradients of every requires_grad leaf reachable from `loss`.
  // Visits each recorded node at most once, in reverse recording order.
  void backward(Var loss) {
    if (backward_run_) {
      throw SessionError("backward already ran on this session");
    }
    const Node& ln = node(loss);
    if (!ln.value.is_scalar()) {
      throw ShapeError("backward: loss must be scalar, got " +
                       shape_str(ln.value.shape()));
    }
    backward_run_ = true;
    if (!ln.needs_grad) return;  // no trainable leaves feed the loss
    nodes_[loss.idx].grad[0] = 1.0;
    for (std::size_t i = loss.idx + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.back && n.needs_grad) n.back(*this);
    }
  }

  bool backward_done() const { return backward_run_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // allocated iff needs_grad
    bool needs_grad = false;
    std::vector<std::size_t> parents;
    std::function<void(Tape&)> back;  // invoked as back(*this) at self index
  };

  const Node& node(Var v) const {
    if (v.idx >= nodes_.size()) {
      throw SessionError("node does not belong to this session");
    }
    return nodes_[v.idx];
  }

  Tensor* grad_ptr(std::size_t idx) {
    return nodes_[idx].needs_grad ? &nodes_[idx].grad : nullptr;
  }

  template <typename Fn>
  void add_grad(std::size_t idx, Fn&& fn) {
    if (nodes_[idx].needs_grad) fn(nodes_[idx].grad);
  }

  Var push(Tensor value, bool needs_grad, std::vector<std::size_t> parents,
           std::function<void(Tape&)> back) {
    if (backward_run_) {
      throw SessionError("session consumed: record on a fresh Tape");
    }
    Node n;
    n.needs_grad = needs_grad;
    if (needs_grad) n.grad = Tensor::zeros(value.shape());
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  // generic recorder: a back closure that receives the tape and looks up its
  // own node by the captured index
  Var record(Tensor out, std::vector<std::size_t> parents,
             std::function<void(Tape&, std::size_t)> back) {
    bool needs = false;
    for (std::size_t p : parents) needs = needs || nodes_[p].needs_grad;
    if (!needs) return push(std::move(out), false, std::move(parents), nullptr);
    const std::size_t self = nodes_.size();
    return push(std::move(out), true, std::move(parents),
                [self, back = std::move(back)](Tape& t) { back(t, self); });
  }

  Var record(Tensor out, std::initializer_list<Var> parents,
             std::function<void(Tape&, std::size_t)> back) {
    std::vector<std::size_t> p;
    for (Var v : parents) {
      node(v);  // ownership check
      p.push_back(v.idx);
    }
    return record(std::move(out), std::move(p), std::move(back));
  }

  template <typename F, typename G>
  Var unary(Var a, F&& f, G&& df) {
    const Tensor& x = value(a);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
    return record(std::move(out), {a},
                  [df](Tape& t, std::size_t self) {
                    const Node& nd = t.nodes_[self];
                    const Tensor& g = nd.grad;
                    const Tensor& x = t.nodes_[nd.parents[0]].value;
                    t.add_grad(nd.parents[0], [&](Tensor& dst) {
                      for (std::size_t i = 0; i < dst.size(); ++i) {
                        dst[i] += df(x[i], g[i]);
                      }
                    });
                  });
  }

  // exact-shape or scalar-broadcast binary op
  template <typename F, typename G>
  Var binary(Var a, Var b, const char* name, F&& f, G&& df) {
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    const bool xs = x.is_scalar(), ys = y.is_scalar();
    check_shape(x.same_shape(y) || xs || ys,
                        std::string(name) + ": shapes " + shape_str(x.shape()) +
                            " and " + shape_str(y.shape()) +
                            " are neither equal nor scalar-broadcastable");
    const Tensor& big = (xs && !ys) ? y : x;
    Tensor out(big.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = f(x[xs ? 0 : i], y[ys ? 0 : i]);
    }
    return record(std::move(out), {a, b},
                  [df, xs, ys](Tape& t, std::size_t self) {
                    const Node& nd = t.nodes_[self];
                    const Tensor& g = nd.grad;
                    const Tensor& x = t.nodes_[nd.parents[0]].value;
                    const Tensor& y = t.nodes_[nd.parents[1]].value;
                    // accumulate locally, then fold scalar sides by summation
                    Tensor gx = Tensor::zeros(x.shape());
                    Tensor gy = Tensor::zeros(y.shape());
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      double ga = 0.0, gb = 0.0;
                      df(x[xs ? 0 : i], y[ys ? 0 : i], g[i], ga, gb);
                      gx[xs ? 0 : i] += ga;
                      gy[ys ? 0 : i] += gb;
                    }
                    t.add_grad(nd.parents[0], [&](Tensor& dst) {
                      for (std::size_t i = 0; i < dst.size(); ++i) {
                        dst[i] += gx[i];
                      }
                    });
                    t.add_grad(nd.parents[1], [&](Tensor& dst) {
                      for (std::size_t i = 0; i < dst.size(); ++i) {
                        dst[i] += gy[i];
                      }
                    });
                  });
  }

  std::vector<Node> nodes_;
  bool backward_run_ = false;
};

}  // namespace mdm

#endif  // MDM_TAPE_HPP
