#include "mlae/tape.hpp"

#include <cmath>
#include <utility>

namespace mlae {

namespace {
constexpr double kLayerNormEps = 1e-5;
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

inline double gauss_cdf(double x) { return 0.5 * (1.0 + std::erf(x * kInvSqrt2)); }
inline double gauss_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }
}  // namespace

Gradients::Gradients(const Tape* tape, std::vector<std::optional<Matrix>> grads)
    : tape_(tape), grads_(std::move(grads)) {
  zero_cache_.resize(grads_.size());
}

const Matrix& Gradients::get(Value leaf) const {
  if (!leaf.valid() || static_cast<std::size_t>(leaf.id) >= grads_.size()) {
    throw ContractError("Gradients::get: unknown node");
  }
  if (grads_[leaf.id].has_value()) return *grads_[leaf.id];
  if (!zero_cache_[leaf.id].has_value()) {
    const Matrix& v = tape_->value(leaf);
    zero_cache_[leaf.id] = Matrix::zeros(v.rows(), v.cols());
  }
  return *zero_cache_[leaf.id];
}

bool Gradients::reached(Value leaf) const {
  return leaf.valid() && static_cast<std::size_t>(leaf.id) < grads_.size() &&
         grads_[leaf.id].has_value();
}

Value Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Value{static_cast<int>(nodes_.size()) - 1};
}

const Tape::Node& Tape::node(Value v) const {
  if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw ContractError("Tape: invalid value handle");
  }
  return nodes_[v.id];
}

const Matrix& Tape::value(Value v) const { return node(v).value; }
bool Tape::is_trainable_leaf(Value v) const { return node(v).trainable_leaf; }
bool Tape::requires_grad(Value v) const { return node(v).requires_grad; }

void Tape::accumulate(GradSink& sink, int id, const Matrix& g) const {
  if (!nodes_[id].requires_grad) return;
  if (!sink[id].has_value()) {
    sink[id] = g;
    return;
  }
  Matrix& acc = *sink[id];
  for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += g.data()[i];
}

void Tape::accumulate_scaled(GradSink& sink, int id, const Matrix& g, double s) const {
  if (!nodes_[id].requires_grad) return;
  if (!sink[id].has_value()) {
    sink[id] = Matrix::zeros(g.rows(), g.cols());
  }
  Matrix& acc = *sink[id];
  for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += s * g.data()[i];
}

Value Tape::param(Matrix m) {
  Node n;
  n.value = std::move(m);
  n.trainable_leaf = true;
  n.requires_grad = true;
  return push(std::move(n));
}

Value Tape::constant(Matrix m) {
  Node n;
  n.value = std::move(m);
  return push(std::move(n));
}

Value Tape::matmul(Value a, Value b) {
  const int aid = a.id, bid = b.id;
  Node n;
  n.value = mlae::matmul(value(a), value(b));
  n.requires_grad = requires_grad(a) || requires_grad(b);
  if (n.requires_grad) {
    n.backward = [aid, bid](const Matrix& gout, GradSink& sink, const Tape& tape) {
      if (tape.nodes_[aid].requires_grad) {
        tape.accumulate(sink, aid, matmul_nt(gout, tape.nodes_[bid].value));
      }
      if (tape.nodes_[bid].requires_grad) {
        tape.accumulate(sink, bid, matmul_tn(tape.nodes_[aid].value, gout));
      }
    };
  }
  return push(std::move(n));
}

Value Tape::add(Value a, Value b) {
  const int aid = a.id, bid = b.id;
  Node n;
  n.value = mlae::add(value(a), value(b));
  n.requires_grad = requires_grad(a) || requires_grad(b);
  if (n.requires_grad) {
    n.backward = [aid, bid](const Matrix& gout, GradSink& sink, const Tape& tape) {
      tape.accumulate(sink, aid, gout);
      tape.accumulate(sink, bid, gout);
    };
  }
  return push(std::move(n));
}

Value Tape::add_row(Value x, Value bias) {
  const Matrix& xv = value(x);
  const Matrix& bv = value(bias);
  if (bv.rows() != 1 || bv.cols() != xv.cols()) {
    throw ShapeError("add_row: bias " + bv.shape_str() + " vs x " + xv.shape_str());
  }
  const int xid = x.id, bid = bias.id;
  Node n;
  n.value = Matrix(xv.rows(), xv.cols());
  for (int i = 0; i < xv.rows(); ++i)
    for (int j = 0; j < xv.cols(); ++j) n.value(i, j) = xv(i, j) + bv(0, j);
  check_finite(n.value, "add_row");
  n.requires_grad = requires_grad(x) || requires_grad(bias);
  if (n.requires_grad) {
    n.backward = [xid, bid](const Matrix& gout, GradSink& sink, const Tape& tape) {
      tape.accumulate(sink, xid, gout);
      if (tape.nodes_[bid].requires_grad) {
        Matrix gb(1, gout.cols());
        for (int i = 0; i < gout.rows(); ++i)
          for (int j = 0; j < gout.cols(); ++j) gb(0, j) += gout(i, j);
        tape.accumulate(sink, bid, gb);
      }
    };
  }
  return push(std::move(n));
}

Value Tape::scale(Value x, double s) {
  const int xid = x.id;
  Node n;
  n.value = mlae::scale(value(x), s);
  n.requires_grad = requires_grad(x);
  if (n.requires_grad) {
    n.backward = [xid, s](const Matrix& gout, GradSink& sink, const Tape& tape) {
      tape.accumulate_scaled(sink, xid, gout, s);
    };
  }
  return push(std::move(n));
}

Value Tape::scale_by(Value x, Value s) {
  const Matrix& sv = value(s);
  if (sv.rows() != 1 || sv.cols() != 1) {
    throw ShapeError("scale_by: coefficient must be 1x1, got " + sv.shape_str());
  }
  const int xid = x.id, sid = s.id;
  Node n;
  n.value = mlae::scale(value(x), sv(0, 0));
  n.requires_grad = requires_grad(x) || requires_grad(s);
  if (n.requires_grad) {
    n.backward = [xid, sid](const Matrix& gout, GradSink& sink, const Tape& tape) {
      const double sval = tape.nodes_[sid].value(0, 0);
      tape.accumulate_scaled(sink, xid, gout, sval);
      if (tape.nodes_[sid].requires_grad) {
        Matrix gs(1, 1);
        gs(0, 0) = frobenius_dot(gout, tape.nodes_[xid].value);
        tape.accumulate(sink, sid, gs);
      }
    };
  }
  return push(std::move(n));
}

Value Tape::row_scale(Value x, Value coeffs) {
  const Matrix& xv = value(x);
  const Matrix& cv = value(coeffs);
  if (cv.rows() != 1 || cv.cols() != xv.rows()) {
    throw ShapeError("row_scale: coeffs " + cv.shape_str() + " vs x " + xv.shape_str());
  }
  const int xid = x.id, cid = coeffs.id;
  Node n;
  n.value = Matrix(xv.rows(), xv.cols());
  for (int i = 0; i < xv.rows(); ++i)
    for (int j = 0; j < xv.cols(); ++j) n.value(i, j) = cv(0, i) * xv(i, j);
  check_finite(n.value, "row_scale");
  n.requires_grad = requires_grad(x) || requires_grad(coeffs);
  if (n.requires_grad) {
    n.backward = [xid, cid](const Matrix& gout, GradSink& sink, const Tape& tape) {
      const Matrix& xval = tape.nodes_[xid].value;
      const Matrix& cval = tape.nodes_[cid].value;
      if (tape.nodes_[xid].requires_grad) {
        Matrix gx(xval.rows(), xval.cols());
        for (int i = 0; i < xval.rows(); ++i)
          for (int j = 0; j < xval.cols(); ++j) gx(i, j) = cval(0, i) * gout(i, j);
        tape.accumulate(sink, xid, gx);
      }
      if (tape.nodes_[cid].requires_grad) {
        Matrix gc(1, xval.rows());
        for (int i = 0; i < xval.rows(); ++i) {
          double s = 0.0;
          for (int j = 0; j < xval.cols(); ++j) s += gout(i, j) * xval(i, j);
          gc(0, i) = s;
        }
        tape.accumulate(sink, cid, gc);
      }
    };
  }
  return push(std::move(n));
}

Value Tape::hadamard_const(Value x, const Matrix& m) {
  const Matrix& xv = value(x);
  if (!xv.same_shape(m)) {
    throw ShapeError("hadamard_const: " + xv.shape_str() + " vs " + m.shape_str());
  }
  const int xid = x.id;
  Node n;
  n.value = hadamard(xv, m);
  n.requires_grad = requires_grad(x);
  if (n.requires_grad) {
    n.backward = [xid, m](const Matrix& gout, GradSink& sink, const Tape& tape) {
      tape.accumulate(sink, xid, hadamard(gout, m));
    };
  }
  return push(std::move(n));
}

Value Tape::gelu(Value x) {
  const Matrix& xv = value(x);
  const int xid = x.id;
  Node n;
  n.value = Matrix(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = xv.data()[i];
    n.value.data()[i] = v * gauss_cdf(v);
  }
  check_finite(n.value, "gelu");
  n.requires_grad = requires_grad(x);
  if (n.requires_grad) {
    n.backward = [xid](const Matrix& gout, GradSink& sink, const Tape& tape) {
      const Matrix& xval = tape.nodes_[xid].value;
      Matrix gx(xval.rows(), xval.cols());
      for (std::size_t i = 0; i < xval.size(); ++i) {
        const double v = xval.data()[i];
        gx.data()[i] = gout.data()[i] * (gauss_cdf(v) + v * gauss_pdf(v));
      }
      tape.accumulate(sink, xid, gx);
    };
  }
  return push(std::move(n));
}

Value Tape::layer_norm(Value x, const Matrix& gamma, const Matrix& beta) {
  const Matrix& xv = value(x);
  const int d = xv.cols();
  if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d) {
    throw ShapeError("layer_norm: affine params must be 1x" + std::to_string(d));
  }
  Matrix xhat(xv.rows(), d);
  Matrix inv_std(xv.rows(), 1);
  Node n;
  n.value = Matrix(xv.rows(), d);
  for (int i = 0; i < xv.rows(); ++i) {
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += xv(i, j);
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = xv(i, j) - mean;
      var += c * c;
    }
    var /= d;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std(i, 0) = inv;
    for (int j = 0; j < d; ++j) {
      const double h = (xv(i, j) - mean) * inv;
      xhat(i, j) = h;
      n.value(i, j) = gamma(0, j) * h + beta(0, j);
    }
  }
  check_finite(n.value, "layer_norm");
  n.requires_grad = requires_grad(x);
  if (n.requires_grad) {
    const int xid = x.id;
    n.backward = [xid, gamma, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                     const Matrix& gout, GradSink& sink, const Tape& tape) {
      const int rows = gout.rows(), d = gout.cols();
      Matrix gx(rows, d);
      for (int i = 0; i < rows; ++i) {
        double m1 = 0.0, m2 = 0.0;
        for (int j = 0; j < d; ++j) {
          const double gh = gout(i, j) * gamma(0, j);
          m1 += gh;
          m2 += gh * xhat(i, j);
        }
        m1 /= d;
        m2 /= d;
        const double inv = inv_std(i, 0);
        for (int j = 0; j < d; ++j) {
          const double gh = gout(i, j) * gamma(0, j);
          gx(i, j) = (gh - m1 - xhat(i, j) * m2) * inv;
        }
      }
      tape.accumulate(sink, xid, gx);
    };
  }
  return push(std::move(n));
}

Value Tape::attention(Value qkv, int heads, int tokens) {
  const Matrix& qv = value(qkv);
  if (qv.cols() % 3 != 0) throw ShapeError("attention: input cols must be 3*d");
  const int d = qv.cols() / 3;
  if (heads < 1 || d % heads != 0) throw ParameterError("attention: d must divide by heads");
  if (tokens < 1 || qv.rows() % tokens != 0) {
    throw ShapeError("attention: rows must be a multiple of tokens");
  }
  const int dh = d / heads;
  const int batch = qv.rows() / tokens;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  // Softmax probabilities for every (sample, head); kept for backward.
  Matrix probs(batch * heads * tokens, tokens);
  Node n;
  n.value = Matrix(qv.rows(), d);
  for (int b = 0; b < batch; ++b) {
    const int row0 = b * tokens;
    for (int h = 0; h < heads; ++h) {
      const int qoff = h * dh, koff = d + h * dh, voff = 2 * d + h * dh;
      const int poff = (b * heads + h) * tokens;
      for (int ti = 0; ti < tokens; ++ti) {
        // scores -> stable softmax row
        double row_max = -1e300;
        for (int tj = 0; tj < tokens; ++tj) {
          double s = 0.0;
          for (int k = 0; k < dh; ++k) {
            s += qv(row0 + ti, qoff + k) * qv(row0 + tj, koff + k);
          }
          s *= inv_sqrt_dh;
          probs(poff + ti, tj) = s;
          row_max = std::max(row_max, s);
        }
        double denom = 0.0;
        for (int tj = 0; tj < tokens; ++tj) {
          const double e = std::exp(probs(poff + ti, tj) - row_max);
          probs(poff + ti, tj) = e;
          denom += e;
        }
        for (int tj = 0; tj < tokens; ++tj) probs(poff + ti, tj) /= denom;
        for (int k = 0; k < dh; ++k) {
          double o = 0.0;
          for (int tj = 0; tj < tokens; ++tj) {
            o += probs(poff + ti, tj) * qv(row0 + tj, voff + k);
          }
          n.value(row0 + ti, qoff + k) = o;
        }
      }
    }
  }
  check_finite(n.value, "attention");
  n.requires_grad = requires_grad(qkv);
  if (n.requires_grad) {
    const int qid = qkv.id;
    n.backward = [qid, heads, tokens, d, dh, batch, inv_sqrt_dh, probs = std::move(probs)](
                     const Matrix& gout, GradSink& sink, const Tape& tape) {
      const Matrix& qv = tape.nodes_[qid].value;
      Matrix gqkv(qv.rows(), qv.cols());
      std::vector<double> dp(tokens), ds(tokens);
      for (int b = 0; b < batch; ++b) {
        const int row0 = b * tokens;
        for (int h = 0; h < heads; ++h) {
          const int qoff = h * dh, koff = d + h * dh, voff = 2 * d + h * dh;
          const int poff = (b * heads + h) * tokens;
          for (int ti = 0; ti < tokens; ++ti) {
            // dV rows and dP from dO = gout block
            for (int tj = 0; tj < tokens; ++tj) {
              double acc = 0.0;
              for (int k = 0; k < dh; ++k) {
                acc += gout(row0 + ti, qoff + k) * qv(row0 + tj, voff + k);
              }
              dp[tj] = acc;
            }
            double dot = 0.0;
            for (int tj = 0; tj < tokens; ++tj) dot += dp[tj] * probs(poff + ti, tj);
            for (int tj = 0; tj < tokens; ++tj) {
              ds[tj] = probs(poff + ti, tj) * (dp[tj] - dot) * inv_sqrt_dh;
            }
            for (int tj = 0; tj < tokens; ++tj) {
              const double p = probs(poff + ti, tj);
              const double dsj = ds[tj];
              for (int k = 0; k < dh; ++k) {
                // dV += P^T dO
                gqkv(row0 + tj, voff + k) += p * gout(row0 + ti, qoff + k);
                // dQ += dS K ; dK += dS^T Q
                gqkv(row0 + ti, qoff + k) += dsj * qv(row0 + tj, koff + k);
                gqkv(row0 + tj, koff + k) += dsj * qv(row0 + ti, qoff + k);
              }
            }
          }
        }
      }
      tape.accumulate(sink, qid, gqkv);
    };
  }
  return push(std::move(n));
}

Value Tape::mean_pool(Value x, int tokens) {
  const Matrix& xv = value(x);
  if (tokens < 1 || xv.rows() % tokens != 0) {
    throw ShapeError("mean_pool: rows must be a multiple of tokens");
  }
  const int batch = xv.rows() / tokens;
  const int d = xv.cols();
  Node n;
  n.value = Matrix(batch, d);
  for (int b = 0; b < batch; ++b) {
    for (int t = 0; t < tokens; ++t)
      for (int j = 0; j < d; ++j) n.value(b, j) += xv(b * tokens + t, j);
    for (int j = 0; j < d; ++j) n.value(b, j) /= tokens;
  }
  check_finite(n.value, "mean_pool");
  n.requires_grad = requires_grad(x);
  if (n.requires_grad) {
    const int xid = x.id;
    n.backward = [xid, tokens, batch, d](const Matrix& gout, GradSink& sink,
                                         const Tape& tape) {
      Matrix gx(batch * tokens, d);
      const double inv = 1.0 / tokens;
      for (int b = 0; b < batch; ++b)
        for (int t = 0; t < tokens; ++t)
          for (int j = 0; j < d; ++j) gx(b * tokens + t, j) = gout(b, j) * inv;
      tape.accumulate(sink, xid, gx);
    };
  }
  return push(std::move(n));
}

Value Tape::softmax_rows(Value x) {
  const Matrix& xv = value(x);
  Node n;
  n.value = Matrix(xv.rows(), xv.cols());
  for (int i = 0; i < xv.rows(); ++i) {
    double row_max = -1e300;
    for (int j = 0; j < xv.cols(); ++j) row_max = std::max(row_max, xv(i, j));
    double denom = 0.0;
    for (int j = 0; j < xv.cols(); ++j) {
      const double e = std::exp(xv(i, j) - row_max);
      n.value(i, j) = e;
      denom += e;
    }
    for (int j = 0; j < xv.cols(); ++j) n.value(i, j) /= denom;
  }
  check_finite(n.value, "softmax_rows");
  n.requires_grad = requires_grad(x);
  if (n.requires_grad) {
    const int xid = x.id;
    const int self = static_cast<int>(nodes_.size());
    n.backward = [xid, self](const Matrix& gout, GradSink& sink, const Tape& tape) {
      const Matrix& p = tape.nodes_[self].value;
      Matrix gx(p.rows(), p.cols());
      for (int i = 0; i < p.rows(); ++i) {
        double dot = 0.0;
        for (int j = 0; j < p.cols(); ++j) dot += gout(i, j) * p(i, j);
        for (int j = 0; j < p.cols(); ++j) gx(i, j) = p(i, j) * (gout(i, j) - dot);
      }
      tape.accumulate(sink, xid, gx);
    };
  }
  return push(std::move(n));
}

Value Tape::cross_entropy_mean(Value logits, const std::vector<int>& labels) {
  const Matrix& lv = value(logits);
  if (static_cast<int>(labels.size()) != lv.rows()) {
    throw ShapeError("cross_entropy_mean: labels size vs logits rows");
  }
  for (int y : labels) {
    if (y < 0 || y >= lv.cols()) throw ParameterError("cross_entropy_mean: label out of range");
  }
  const int batch = lv.rows(), classes = lv.cols();
  Matrix probs(batch, classes);
  double loss = 0.0;
  for (int i = 0; i < batch; ++i) {
    double row_max = -1e300;
    for (int j = 0; j < classes; ++j) row_max = std::max(row_max, lv(i, j));
    double denom = 0.0;
    for (int j = 0; j < classes; ++j) {
      const double e = std::exp(lv(i, j) - row_max);
      probs(i, j) = e;
      denom += e;
    }
    for (int j = 0; j < classes; ++j) probs(i, j) /= denom;
    loss += (row_max + std::log(denom)) - lv(i, labels[i]);
  }
  loss /= batch;
  Node n;
  n.value = Matrix(1, 1);
  n.value(0, 0) = loss;
  check_finite(n.value, "cross_entropy_mean");
  n.requires_grad = requires_grad(logits);
  if (n.requires_grad) {
    const int lid = logits.id;
    n.backward = [lid, labels, probs = std::move(probs)](const Matrix& gout, GradSink& sink,
                                                         const Tape& tape) {
      (void)tape;
      const double g = gout(0, 0) / probs.rows();
      Matrix gl(probs.rows(), probs.cols());
      for (int i = 0; i < probs.rows(); ++i) {
        for (int j = 0; j < probs.cols(); ++j) gl(i, j) = probs(i, j) * g;
        gl(i, labels[i]) -= g;
      }
      tape.accumulate(sink, lid, gl);
    };
  }
  return push(std::move(n));
}

Value Tape::sum(Value x) {
  const Matrix& xv = value(x);
  Node n;
  n.value = Matrix(1, 1);
  double s = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) s += xv.data()[i];
  n.value(0, 0) = s;
  check_finite(n.value, "sum");
  n.requires_grad = requires_grad(x);
  if (n.requires_grad) {
    const int xid = x.id;
    n.backward = [xid](const Matrix& gout, GradSink& sink, const Tape& tape) {
      const Matrix& xval = tape.nodes_[xid].value;
      tape.accumulate(sink, xid,
                      Matrix::filled(xval.rows(), xval.cols(), gout(0, 0)));
    };
  }
  return push(std::move(n));
}

Gradients Tape::backward(Value loss) {
  const Matrix& lv = value(loss);
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw ContractError("backward: loss must be a 1x1 scalar node, got " + lv.shape_str());
  }
  GradSink sink(nodes_.size());
  sink[loss.id] = Matrix::filled(1, 1, 1.0);
  for (int i = loss.id; i >= 0; --i) {
    if (!sink[i].has_value()) continue;
    if (nodes_[i].backward) nodes_[i].backward(*sink[i], sink, *this);
  }
  return Gradients(this, std::move(sink));
}

}  // namespace mlae
