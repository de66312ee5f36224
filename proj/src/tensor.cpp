#include "protopart/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <utility>

namespace protopart {

namespace {

std::string shape_to_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Tape shared by all tracked inputs of an op, or nullptr when every input
// is untracked.
Tape* common_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (!t->tracked()) continue;
    if (tape == nullptr) {
      tape = t->tape;
    } else if (tape != t->tape) {
      throw ArgumentError("operands belong to different tapes");
    }
  }
  return tape;
}

int parent_id(const Tensor& t) { return t.tracked() ? t.node : -1; }

std::vector<int> tracked_parents(std::initializer_list<int> ids) {
  std::vector<int> out;
  for (int id : ids) {
    if (id >= 0) out.push_back(id);
  }
  return out;
}

double stable_sigmoid(double v) {
  if (v >= 0.0) {
    return 1.0 / (1.0 + std::exp(-v));
  }
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_to_string(shape));
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

Tensor::Tensor(Shape s, std::vector<double> v)
    : shape(std::move(s)), values(std::move(v)) {
  if (shape_size(shape) != values.size()) {
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not match shape " + shape_to_string(shape));
  }
}

Tensor Tensor::zeros(Shape s) {
  std::size_t n = shape_size(s);
  return Tensor(std::move(s), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(Shape s, double value) {
  std::size_t n = shape_size(s);
  return Tensor(std::move(s), std::vector<double>(n, value));
}

int Tensor::extent(int axis) const {
  if (axis < 0 || axis >= rank()) throw ArgumentError("axis out of range");
  return shape[axis];
}

double Tensor::scalar() const {
  if (size() != 1) {
    throw ArgumentError("scalar() requires a size-1 tensor, got shape " +
                        shape_to_string(shape));
  }
  return values[0];
}

const std::vector<double>& Tensor::grad() const {
  if (!tracked()) throw ArgumentError("grad() on an untracked tensor");
  return tape->grad(*this);
}

// --------------------------------------------------------------------------
// Tape
// --------------------------------------------------------------------------

int Tape::record(std::size_t out_size, std::vector<int> parents,
                 std::function<void(Tape&, int)> backprop) {
  const int id = static_cast<int>(nodes_.size());
  for (int p : parents) {
    if (p >= id) throw ArgumentError("tape parents must precede their node");
  }
  nodes_.push_back(Node{std::move(parents), std::move(backprop)});
  grads_.emplace_back(out_size, 0.0);
  return id;
}

Tensor Tape::watch(const Tensor& t) {
  Tensor leaf;
  leaf.shape = t.shape;
  leaf.values = t.values;
  leaf.tape = this;
  leaf.node = record(leaf.values.size(), {}, nullptr);
  return leaf;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.tracked() || loss.tape != this) {
    throw ArgumentError("backward() loss is not recorded on this tape");
  }
  if (loss.size() != 1) {
    throw ArgumentError("backward() requires a scalar loss");
  }
  if (backward_run_) {
    throw ArgumentError("backward() already run on this tape; reset() first");
  }
  backward_run_ = true;
  grads_[loss.node][0] = 1.0;
  for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
    if (nodes_[id].backprop) nodes_[id].backprop(*this, id);
  }
}

const std::vector<double>& Tape::grad(const Tensor& t) const {
  if (!t.tracked() || t.tape != this) {
    throw ArgumentError("grad() tensor is not recorded on this tape");
  }
  return grads_[t.node];
}

void Tape::reset() {
  nodes_.clear();
  grads_.clear();
  backward_run_ = false;
}

// --------------------------------------------------------------------------
// Ops
// --------------------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& filters, int stride,
              int padding) {
  if (input.rank() != 3) throw ShapeError("conv2d input must be H x W x C");
  if (filters.rank() != 4) {
    throw ShapeError("conv2d filters must be Kh x Kw x Cin x Cout");
  }
  if (stride < 1) throw ArgumentError("conv2d stride must be >= 1");
  if (padding < 0) throw ArgumentError("conv2d padding must be >= 0");
  const int h = input.shape[0], w = input.shape[1], cin = input.shape[2];
  const int kh = filters.shape[0], kw = filters.shape[1];
  const int fcin = filters.shape[2], cout = filters.shape[3];
  if (fcin != cin) {
    throw ShapeError("conv2d filter depth " + std::to_string(fcin) +
                     " does not match input channels " + std::to_string(cin));
  }
  if (kh > h + 2 * padding || kw > w + 2 * padding) {
    throw ShapeError("conv2d kernel larger than padded input");
  }
  const int oh = (h + 2 * padding - kh) / stride + 1;
  const int ow = (w + 2 * padding - kw) / stride + 1;

  Tensor out = Tensor::zeros({oh, ow, cout});
  const double* in = input.values.data();
  const double* f = filters.values.data();
  double* o = out.values.data();
  for (int r = 0; r < oh; ++r) {
    const int ih0 = r * stride - padding;
    for (int c = 0; c < ow; ++c) {
      const int iw0 = c * stride - padding;
      double* orow = o + (static_cast<std::size_t>(r) * ow + c) * cout;
      for (int a = 0; a < kh; ++a) {
        const int ih = ih0 + a;
        if (ih < 0 || ih >= h) continue;
        for (int b = 0; b < kw; ++b) {
          const int iw = iw0 + b;
          if (iw < 0 || iw >= w) continue;
          const double* irow = in + (static_cast<std::size_t>(ih) * w + iw) * cin;
          const double* frow = f + ((static_cast<std::size_t>(a) * kw + b) * cin) * cout;
          for (int ci = 0; ci < cin; ++ci) {
            const double v = irow[ci];
            const double* fr = frow + static_cast<std::size_t>(ci) * cout;
            for (int co = 0; co < cout; ++co) orow[co] += v * fr[co];
          }
        }
      }
    }
  }

  Tape* tape = common_tape({&input, &filters});
  if (tape) {
    const int pin = parent_id(input);
    const int pfil = parent_id(filters);
    out.tape = tape;
    out.node = tape->record(
        out.size(), tracked_parents({pin, pfil}),
        [pin, pfil, iv = input.values, fv = filters.values, h, w, cin, kh, kw,
         cout, oh, ow, stride, padding](Tape& t, int self) {
          const std::vector<double>& up = t.upstream(self);
          double* gin = pin >= 0 ? t.grad_buffer(pin).data() : nullptr;
          double* gf = pfil >= 0 ? t.grad_buffer(pfil).data() : nullptr;
          for (int r = 0; r < oh; ++r) {
            const int ih0 = r * stride - padding;
            for (int c = 0; c < ow; ++c) {
              const int iw0 = c * stride - padding;
              const double* urow =
                  up.data() + (static_cast<std::size_t>(r) * ow + c) * cout;
              for (int a = 0; a < kh; ++a) {
                const int ih = ih0 + a;
                if (ih < 0 || ih >= h) continue;
                for (int b = 0; b < kw; ++b) {
                  const int iw = iw0 + b;
                  if (iw < 0 || iw >= w) continue;
                  const std::size_t ioff = (static_cast<std::size_t>(ih) * w + iw) * cin;
                  const std::size_t foff = (static_cast<std::size_t>(a) * kw + b) * cin * cout;
                  for (int ci = 0; ci < cin; ++ci) {
                    const double* fr = fv.data() + foff + static_cast<std::size_t>(ci) * cout;
                    double acc = 0.0;
                    if (gf) {
                      const double v = iv[ioff + ci];
                      double* gfr = gf + foff + static_cast<std::size_t>(ci) * cout;
                      for (int co = 0; co < cout; ++co) {
                        gfr[co] += v * urow[co];
                        acc += fr[co] * urow[co];
                      }
                    } else {
                      for (int co = 0; co < cout; ++co) acc += fr[co] * urow[co];
                    }
                    if (gin) gin[ioff + ci] += acc;
                  }
                }
              }
            }
          }
        });
  }
  return out;
}

Tensor elementwise(const Tensor& input, Elementwise kind) {
  Tensor out;
  out.shape = input.shape;
  out.values.resize(input.size());
  if (kind == Elementwise::kRelu) {
    for (std::size_t i = 0; i < input.size(); ++i) {
      out.values[i] = input.values[i] > 0.0 ? input.values[i] : 0.0;
    }
  } else {
    for (std::size_t i = 0; i < input.size(); ++i) {
      out.values[i] = stable_sigmoid(input.values[i]);
    }
  }
  if (input.tracked()) {
    Tape* tape = input.tape;
    const int pin = input.node;
    out.tape = tape;
    out.node = tape->record(
        out.size(), {pin}, [pin, kind, ov = out.values](Tape& t, int self) {
          const std::vector<double>& up = t.upstream(self);
          std::vector<double>& gin = t.grad_buffer(pin);
          if (kind == Elementwise::kRelu) {
            for (std::size_t i = 0; i < up.size(); ++i) {
              if (ov[i] > 0.0) gin[i] += up[i];
            }
          } else {
            for (std::size_t i = 0; i < up.size(); ++i) {
              gin[i] += up[i] * ov[i] * (1.0 - ov[i]);
            }
          }
        });
  }
  return out;
}

namespace {

Tensor pool_impl(const Tensor& input, int window, int stride, bool global) {
  if (input.rank() != 3) throw ShapeError("max_pool input must be H x W x C");
  const int h = input.shape[0], w = input.shape[1], ch = input.shape[2];
  int oh, ow;
  if (global) {
    window = 0;
    oh = ow = 1;
  } else {
    if (window < 1 || stride < 1) {
      throw ArgumentError("max_pool window and stride must be >= 1");
    }
    if (window > h || window > w) {
      throw ShapeError("max_pool window does not fit inside input");
    }
    oh = (h - window) / stride + 1;
    ow = (w - window) / stride + 1;
  }

  Tensor out = Tensor::zeros({oh, ow, ch});
  std::vector<int> argmax(out.size());
  for (int r = 0; r < oh; ++r) {
    for (int c = 0; c < ow; ++c) {
      const int ih0 = global ? 0 : r * stride;
      const int iw0 = global ? 0 : c * stride;
      const int ih1 = global ? h : ih0 + window;
      const int iw1 = global ? w : iw0 + window;
      for (int k = 0; k < ch; ++k) {
        // Seeded from the first window entry so non-finite values still
        // yield a valid argmax; ties keep the earliest row-major entry.
        double best = 0.0;
        int best_idx = -1;
        for (int ih = ih0; ih < ih1; ++ih) {
          for (int iw = iw0; iw < iw1; ++iw) {
            const int idx = (ih * w + iw) * ch + k;
            if (best_idx < 0 || input.values[idx] > best) {
              best = input.values[idx];
              best_idx = idx;
            }
          }
        }
        const int oidx = (r * ow + c) * ch + k;
        out.values[oidx] = best;
        argmax[oidx] = best_idx;
      }
    }
  }

  if (input.tracked()) {
    Tape* tape = input.tape;
    const int pin = input.node;
    out.tape = tape;
    out.node = tape->record(out.size(), {pin},
                            [pin, am = std::move(argmax)](Tape& t, int self) {
                              const std::vector<double>& up = t.upstream(self);
                              std::vector<double>& gin = t.grad_buffer(pin);
                              for (std::size_t i = 0; i < up.size(); ++i) {
                                gin[am[i]] += up[i];
                              }
                            });
  }
  return out;
}

}  // namespace

Tensor max_pool_window(const Tensor& input, int window, int stride) {
  return pool_impl(input, window, stride, /*global=*/false);
}

Tensor max_pool_global(const Tensor& input) {
  return pool_impl(input, 0, 0, /*global=*/true);
}

Tensor linear(const Tensor& input, const Tensor& weights) {
  if (input.rank() != 1) throw ShapeError("linear input must be rank 1");
  if (weights.rank() != 2) throw ShapeError("linear weights must be K x m");
  const int m = input.shape[0];
  const int k = weights.shape[0];
  if (weights.shape[1] != m) {
    throw ShapeError("linear inner extents disagree: weights " +
                     std::to_string(weights.shape[1]) + " vs input " +
                     std::to_string(m));
  }
  Tensor out = Tensor::zeros({k});
  for (int r = 0; r < k; ++r) {
    double acc = 0.0;
    const double* wrow = weights.values.data() + static_cast<std::size_t>(r) * m;
    for (int j = 0; j < m; ++j) acc += wrow[j] * input.values[j];
    out.values[r] = acc;
  }
  Tape* tape = common_tape({&input, &weights});
  if (tape) {
    const int pin = parent_id(input);
    const int pw = parent_id(weights);
    out.tape = tape;
    out.node = tape->record(
        out.size(), tracked_parents({pin, pw}),
        [pin, pw, iv = input.values, wv = weights.values, m, k](Tape& t, int self) {
          const std::vector<double>& up = t.upstream(self);
          if (pin >= 0) {
            std::vector<double>& gin = t.grad_buffer(pin);
            for (int r = 0; r < k; ++r) {
              const double u = up[r];
              const double* wrow = wv.data() + static_cast<std::size_t>(r) * m;
              for (int j = 0; j < m; ++j) gin[j] += wrow[j] * u;
            }
          }
          if (pw >= 0) {
            std::vector<double>& gw = t.grad_buffer(pw);
            for (int r = 0; r < k; ++r) {
              const double u = up[r];
              double* grow = gw.data() + static_cast<std::size_t>(r) * m;
              for (int j = 0; j < m; ++j) grow[j] += iv[j] * u;
            }
          }
        });
  }
  return out;
}

Tensor softmax_cross_entropy(const Tensor& logits, int label) {
  if (logits.rank() != 1) {
    throw ShapeError("softmax_cross_entropy logits must be rank 1");
  }
  const int k = logits.shape[0];
  if (label < 0 || label >= k) {
    throw ArgumentError("label " + std::to_string(label) +
                        " out of range for " + std::to_string(k) + " classes");
  }
  const double mx = *std::max_element(logits.values.begin(), logits.values.end());
  double sum = 0.0;
  std::vector<double> probs(k);
  for (int i = 0; i < k; ++i) {
    probs[i] = std::exp(logits.values[i] - mx);
    sum += probs[i];
  }
  for (int i = 0; i < k; ++i) probs[i] /= sum;
  const double loss = std::log(sum) + mx - logits.values[label];

  Tensor out({1}, {loss});
  if (logits.tracked()) {
    Tape* tape = logits.tape;
    const int pin = logits.node;
    out.tape = tape;
    out.node = tape->record(1, {pin},
                            [pin, label, p = std::move(probs)](Tape& t, int self) {
                              const double u = t.upstream(self)[0];
                              std::vector<double>& gin = t.grad_buffer(pin);
                              for (std::size_t i = 0; i < p.size(); ++i) {
                                gin[i] += u * p[i];
                              }
                              gin[label] -= u;
                            });
  }
  return out;
}

Tensor l2_distance_map(const Tensor& z, const Tensor& p) {
  if (z.rank() != 3 || p.rank() != 3) {
    throw ShapeError("l2_distance_map operands must be rank 3");
  }
  const int h = z.shape[0], w = z.shape[1], d = z.shape[2];
  const int ph = p.shape[0], pw = p.shape[1], pd = p.shape[2];
  if (pd != d) {
    throw ShapeError("l2_distance_map depth mismatch: z " + std::to_string(d) +
                     " vs p " + std::to_string(pd));
  }
  if (ph > h || pw > w) throw ShapeError("prototype larger than latent map");
  const int oh = h - ph + 1, ow = w - pw + 1;

  Tensor out = Tensor::zeros({oh, ow});
  for (int r = 0; r < oh; ++r) {
    for (int c = 0; c < ow; ++c) {
      double acc = 0.0;
      for (int a = 0; a < ph; ++a) {
        const double* zrow = z.values.data() + ((static_cast<std::size_t>(r) + a) * w + c) * d;
        const double* prow = p.values.data() + (static_cast<std::size_t>(a) * pw) * d;
        for (std::size_t i = 0; i < static_cast<std::size_t>(pw) * d; ++i) {
          const double diff = zrow[i] - prow[i];
          acc += diff * diff;
        }
      }
      out.values[static_cast<std::size_t>(r) * ow + c] = acc;
    }
  }

  Tape* tape = common_tape({&z, &p});
  if (tape) {
    const int pz = parent_id(z);
    const int pp = parent_id(p);
    out.tape = tape;
    out.node = tape->record(
        out.size(), tracked_parents({pz, pp}),
        [pz, pp, zv = z.values, pv = p.values, h, w, d, ph, pw, oh, ow](Tape& t, int self) {
          const std::vector<double>& up = t.upstream(self);
          double* gz = pz >= 0 ? t.grad_buffer(pz).data() : nullptr;
          double* gp = pp >= 0 ? t.grad_buffer(pp).data() : nullptr;
          for (int r = 0; r < oh; ++r) {
            for (int c = 0; c < ow; ++c) {
              const double u = up[static_cast<std::size_t>(r) * ow + c];
              if (u == 0.0) continue;
              for (int a = 0; a < ph; ++a) {
                const std::size_t zoff = ((static_cast<std::size_t>(r) + a) * w + c) * d;
                const std::size_t poff = (static_cast<std::size_t>(a) * pw) * d;
                for (std::size_t i = 0; i < static_cast<std::size_t>(pw) * d; ++i) {
                  const double g = 2.0 * u * (zv[zoff + i] - pv[poff + i]);
                  if (gz) gz[zoff + i] += g;
                  if (gp) gp[poff + i] -= g;
                }
              }
            }
          }
        });
  }
  return out;
}

std::vector<double> l2_distance_map_expanded(const Tensor& z, const Tensor& p) {
  if (z.rank() != 3 || p.rank() != 3) {
    throw ShapeError("l2_distance_map operands must be rank 3");
  }
  const int h = z.shape[0], w = z.shape[1], d = z.shape[2];
  const int ph = p.shape[0], pw = p.shape[1], pd = p.shape[2];
  if (pd != d) throw ShapeError("l2_distance_map depth mismatch");
  if (ph > h || pw > w) throw ShapeError("prototype larger than latent map");
  const int oh = h - ph + 1, ow = w - pw + 1;

  double p_norm = 0.0;
  for (double v : p.values) p_norm += v * v;

  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int r = 0; r < oh; ++r) {
    for (int c = 0; c < ow; ++c) {
      double z_norm = 0.0;
      double dot = 0.0;
      for (int a = 0; a < ph; ++a) {
        const double* zrow = z.values.data() + ((static_cast<std::size_t>(r) + a) * w + c) * d;
        const double* prow = p.values.data() + (static_cast<std::size_t>(a) * pw) * d;
        for (std::size_t i = 0; i < static_cast<std::size_t>(pw) * d; ++i) {
          z_norm += zrow[i] * zrow[i];
          dot += zrow[i] * prow[i];
        }
      }
      out[static_cast<std::size_t>(r) * ow + c] = z_norm - 2.0 * dot + p_norm;
    }
  }
  return out;
}

namespace {

Tensor min_reduce(const Tensor& t, std::span<const int> positions) {
  if (positions.empty()) {
    throw ArgumentError("minimum over an empty index set");
  }
  // Seed with the first listed position so non-finite values propagate
  // instead of stalling the strict-< scan; ties still pick the earliest.
  double best = 0.0;
  int best_pos = -1;
  for (int pos : positions) {
    if (pos < 0 || static_cast<std::size_t>(pos) >= t.size()) {
      throw ArgumentError("min index out of range");
    }
    if (best_pos < 0 || t.values[pos] < best) {
      best = t.values[pos];
      best_pos = pos;
    }
  }

  Tensor out({1}, {best});
  if (t.tracked()) {
    Tape* tape = t.tape;
    const int pin = t.node;
    out.tape = tape;
    out.node = tape->record(1, {pin}, [pin, best_pos](Tape& tp, int self) {
      tp.grad_buffer(pin)[best_pos] += tp.upstream(self)[0];
    });
  }
  return out;
}

}  // namespace

Tensor reduce_min_global(const Tensor& t) {
  if (t.size() == 0) throw ArgumentError("minimum of an empty tensor");
  std::vector<int> all(t.size());
  std::iota(all.begin(), all.end(), 0);
  return min_reduce(t, all);
}

Tensor min_over(const Tensor& vec, std::span<const int> indices) {
  if (vec.rank() != 1) throw ShapeError("min_over expects a rank-1 tensor");
  return min_reduce(vec, indices);
}

Tensor concat_scalars(std::span<const Tensor> parts) {
  if (parts.empty()) throw ArgumentError("concat_scalars on empty span");
  Tensor out = Tensor::zeros({static_cast<int>(parts.size())});
  Tape* tape = nullptr;
  std::vector<int> parents(parts.size(), -1);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].size() != 1) {
      throw ShapeError("concat_scalars parts must have size 1");
    }
    out.values[i] = parts[i].values[0];
    if (parts[i].tracked()) {
      if (tape && tape != parts[i].tape) {
        throw ArgumentError("operands belong to different tapes");
      }
      tape = parts[i].tape;
      parents[i] = parts[i].node;
    }
  }
  if (tape) {
    std::vector<int> tracked;
    for (int p : parents) {
      if (p >= 0) tracked.push_back(p);
    }
    out.tape = tape;
    out.node = tape->record(out.size(), std::move(tracked),
                            [ps = std::move(parents)](Tape& t, int self) {
                              const std::vector<double>& up = t.upstream(self);
                              for (std::size_t i = 0; i < ps.size(); ++i) {
                                if (ps[i] >= 0) t.grad_buffer(ps[i])[0] += up[i];
                              }
                            });
  }
  return out;
}

Tensor log_distance_ratio(const Tensor& d2, double eps) {
  if (eps <= 0.0 || eps >= 1.0) {
    throw ArgumentError("log_distance_ratio requires 0 < eps < 1");
  }
  Tensor out;
  out.shape = d2.shape;
  out.values.resize(d2.size());
  for (std::size_t i = 0; i < d2.size(); ++i) {
    out.values[i] = std::log((d2.values[i] + 1.0) / (d2.values[i] + eps));
  }
  if (d2.tracked()) {
    Tape* tape = d2.tape;
    const int pin = d2.node;
    out.tape = tape;
    out.node = tape->record(out.size(), {pin},
                            [pin, eps, dv = d2.values](Tape& t, int self) {
                              const std::vector<double>& up = t.upstream(self);
                              std::vector<double>& gin = t.grad_buffer(pin);
                              for (std::size_t i = 0; i < up.size(); ++i) {
                                gin[i] += up[i] * (1.0 / (dv[i] + 1.0) -
                                                   1.0 / (dv[i] + eps));
                              }
                            });
  }
  return out;
}

Tensor weighted_sum(std::span<const Tensor> terms,
                    std::span<const double> coeffs) {
  if (terms.size() != coeffs.size()) {
    throw ArgumentError("weighted_sum terms and coeffs differ in length");
  }
  if (terms.empty()) throw ArgumentError("weighted_sum on empty span");
  double acc = 0.0;
  Tape* tape = nullptr;
  std::vector<int> parents(terms.size(), -1);
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].size() != 1) {
      throw ShapeError("weighted_sum terms must have size 1");
    }
    acc += coeffs[i] * terms[i].values[0];
    if (terms[i].tracked()) {
      if (tape && tape != terms[i].tape) {
        throw ArgumentError("operands belong to different tapes");
      }
      tape = terms[i].tape;
      parents[i] = terms[i].node;
    }
  }
  Tensor out({1}, {acc});
  if (tape) {
    std::vector<int> tracked;
    for (int p : parents) {
      if (p >= 0) tracked.push_back(p);
    }
    out.tape = tape;
    out.node = tape->record(
        1, std::move(tracked),
        [ps = std::move(parents), cs = std::vector<double>(coeffs.begin(), coeffs.end())](
            Tape& t, int self) {
          const double u = t.upstream(self)[0];
          for (std::size_t i = 0; i < ps.size(); ++i) {
            if (ps[i] >= 0) t.grad_buffer(ps[i])[0] += cs[i] * u;
          }
        });
  }
  return out;
}

Tensor reshape(const Tensor& t, Shape s) {
  if (shape_size(s) != t.size()) {
    throw ShapeError("reshape target " + shape_to_string(s) + " has " +
                     std::to_string(shape_size(s)) + " elements, tensor has " +
                     std::to_string(t.size()));
  }
  Tensor out;
  out.shape = std::move(s);
  out.values = t.values;
  if (t.tracked()) {
    Tape* tape = t.tape;
    const int pin = t.node;
    out.tape = tape;
    out.node = tape->record(out.size(), {pin}, [pin](Tape& tp, int self) {
      const std::vector<double>& up = tp.upstream(self);
      std::vector<double>& gin = tp.grad_buffer(pin);
      for (std::size_t i = 0; i < up.size(); ++i) gin[i] += up[i];
    });
  }
  return out;
}

Tensor flatten(const Tensor& t) {
  return reshape(t, {static_cast<int>(t.size())});
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& fn,
                        const Tensor& at, double step) {
  if (step <= 0.0) throw ArgumentError("finite_diff_grad step must be > 0");
  Tensor probe;
  probe.shape = at.shape;
  probe.values = at.values;
  Tensor out = Tensor::zeros(at.shape);
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double saved = probe.values[i];
    probe.values[i] = saved + step;
    const double fp = fn(probe);
    probe.values[i] = saved - step;
    const double fm = fn(probe);
    probe.values[i] = saved;
    out.values[i] = (fp - fm) / (2.0 * step);
  }
  return out;
}

}  // namespace protopart
