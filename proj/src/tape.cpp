#include "hmoe/tape.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

#if defined(__GLIBC__)
#include <malloc.h>
#endif
#if defined(__AVX__) && defined(__GLIBC__)
#include <immintrin.h>
#define HMOE_VEC_MATH 1
extern "C" {
__m256d _ZGVdN4v_erf(__m256d);
__m256d _ZGVdN4v_exp(__m256d);
}
#endif

namespace hmoe {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

ECMap as_mat(const Tensor& t) { return ECMap(t.data.data(), t.rows(), t.cols()); }
EMap as_mat(Tensor& t) { return EMap(t.data.data(), t.rows(), t.cols()); }

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

// The tape churns through multi-MB tensors every step; keep freed blocks in
// the heap instead of returning them to the kernel.
struct AllocTuning {
    AllocTuning() {
#if defined(__GLIBC__)
        mallopt(M_MMAP_THRESHOLD, 256 << 20);
        mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
    }
};
const AllocTuning g_alloc_tuning;

// cdf[i] = 0.5 * (1 + erf(x[i] / sqrt(2)))
void gauss_cdf(const double* x, double* cdf, std::size_t n) {
    std::size_t i = 0;
#ifdef HMOE_VEC_MATH
    const __m256d half = _mm256_set1_pd(0.5);
    const __m256d one = _mm256_set1_pd(1.0);
    const __m256d c = _mm256_set1_pd(kInvSqrt2);
    for (; i + 4 <= n; i += 4) {
        __m256d v = _ZGVdN4v_erf(_mm256_mul_pd(_mm256_loadu_pd(x + i), c));
        _mm256_storeu_pd(cdf + i, _mm256_mul_pd(half, _mm256_add_pd(one, v)));
    }
#endif
    for (; i < n; ++i) cdf[i] = 0.5 * (1.0 + std::erf(x[i] * kInvSqrt2));
}

// ga[i] += g[i] * (cdf[i] + x[i] * pdf(x[i]))
void gelu_grad_accum(const double* x, const double* cdf, const double* g, double* ga,
                     std::size_t n) {
    std::size_t i = 0;
#ifdef HMOE_VEC_MATH
    const __m256d mhalf = _mm256_set1_pd(-0.5);
    const __m256d norm = _mm256_set1_pd(kInvSqrt2Pi);
    for (; i + 4 <= n; i += 4) {
        __m256d xv = _mm256_loadu_pd(x + i);
        __m256d pdf = _mm256_mul_pd(norm, _ZGVdN4v_exp(_mm256_mul_pd(mhalf, _mm256_mul_pd(xv, xv))));
        __m256d deriv = _mm256_add_pd(_mm256_loadu_pd(cdf + i), _mm256_mul_pd(xv, pdf));
        _mm256_storeu_pd(ga + i, _mm256_add_pd(_mm256_loadu_pd(ga + i),
                                               _mm256_mul_pd(_mm256_loadu_pd(g + i), deriv)));
    }
#endif
    for (; i < n; ++i) {
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * x[i] * x[i]);
        ga[i] += g[i] * (cdf[i] + x[i] * pdf);
    }
}

}  // namespace

int Tape::push(Tensor value, std::function<void(Tape&)> back, const char* op) {
    if (!value.all_finite()) {
        throw NumericError(std::string(op) + " produced a non-finite value");
    }
    nodes_.push_back(Node{std::move(value), Tensor{}, std::move(back)});
    return static_cast<int>(nodes_.size()) - 1;
}

const Tape::Node& Tape::node(Var v) const {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size())) {
        throw TapeError("invalid var handle");
    }
    return nodes_[static_cast<std::size_t>(v.id)];
}

void Tape::check(Var v, const char* op) const {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size())) {
        throw TapeError(std::string(op) + ": invalid var handle");
    }
}

Tensor& Tape::grad_buf(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.data.empty() && n.value.numel() > 0) {
        n.grad = Tensor::zeros(n.value.shape);
    }
    return n.grad;
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

const Tensor& Tape::grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.data.empty()) {
        throw TapeError("grad requested before backward reached this node");
    }
    return n.grad;
}

double Tape::scalar(Var v) const {
    const Tensor& t = node(v).value;
    if (t.numel() != 1) throw DimError("scalar() on tensor " + t.shape_str());
    return t.data[0];
}

void Tape::note_selection(const std::vector<int>& v) {
    signature_.insert(signature_.end(), v.begin(), v.end());
}

// ---------------------------------------------------------------- leaves

Var Tape::constant(Tensor t) {
    return Var{push(std::move(t), nullptr, "constant")};
}

Var Tape::param(Param& p) {
    auto it = param_ids_.find(&p);
    if (it != param_ids_.end()) return Var{it->second};
    int id = push(p.value, nullptr, "param");
    param_leaves_.emplace_back(&p, id);
    param_ids_.emplace(&p, id);
    return Var{id};
}

// ------------------------------------------------------------- operators

Var Tape::matmul(Var a, Var b) {
    check(a, "matmul");
    check(b, "matmul");
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows()) {
        throw DimError("matmul " + ta.shape_str() + " x " + tb.shape_str());
    }
    Tensor out = Tensor::zeros({ta.rows(), tb.cols()});
    as_mat(out).noalias() = as_mat(ta) * as_mat(tb);
    int aid = a.id, bid = b.id;
    int id = push(std::move(out), nullptr, "matmul");
    nodes_.back().back = [aid, bid, id](Tape& t) {
        const Tensor& g = t.nodes_[static_cast<std::size_t>(id)].grad;
        const Tensor& va = t.nodes_[static_cast<std::size_t>(aid)].value;
        const Tensor& vb = t.nodes_[static_cast<std::size_t>(bid)].value;
        as_mat(t.grad_buf(aid)).noalias() += as_mat(g) * as_mat(vb).transpose();
        as_mat(t.grad_buf(bid)).noalias() += as_mat(va).transpose() * as_mat(g);
    };
    return Var{id};
}

Var Tape::add(Var a, Var b) {
    check(a, "add");
    check(b, "add");
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb)) throw DimError("add " + ta.shape_str() + " vs " + tb.shape_str());
    Tensor out = ta;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += tb.data[i];
    int aid = a.id, bid = b.id;
    int id = push(std::move(out), nullptr, "add");
    nodes_.back().back = [aid, bid, id](Tape& t) {
        const Tensor& g = t.nodes_[static_cast<std::size_t>(id)].grad;
        Tensor& ga = t.grad_buf(aid);
        Tensor& gb = t.grad_buf(bid);
        for (std::size_t i = 0; i < g.data.size(); ++i) {
            ga.data[i] += g.data[i];
            gb.data[i] += g.data[i];
        }
    };
    return Var{id};
}

Var Tape::sub(Var a, Var b) {
    check(a, "sub");
    check(b, "sub");
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb)) throw DimError("sub " + ta.shape_str() + " vs " + tb.shape_str());
    Tensor out = ta;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= tb.data[i];
    int aid = a.id, bid = b.id;
    int id = push(std::move(out), nullptr, "sub");
    nodes_.back().back = [aid, bid, id](Tape& t) {
        const Tensor& g = t.nodes_[static_cast<std::size_t>(id)].grad;
        Tensor& ga = t.grad_buf(aid);
        Tensor& gb = t.grad_buf(bid);
        for (std::size_t i = 0; i < g.data.size(); ++i) {
            ga.data[i] += g.data[i];
            gb.data[i] -= g.data[i];
        }
    };
    return Var{id};
}

Var Tape::mul(Var a, Var b) {
    check(a, "mul");
    check(b, "mul");
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb)) throw DimError("mul " + ta.shape_str() + " vs " + tb.shape_str());
    Tensor out = ta;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= tb.data[i];
    int aid = a.id, bid = b.id;
    int id = push(std::move(out), nullptr, "mul");
    nodes_.back().back = [aid, bid, id](Tape& t) {
        const Tensor& g = t.nodes_[static_cast<std::size_t>(id)].grad;
        const Tensor& va = t.nodes_[static_cast<std::size_t>(aid)].value;
        const Tensor& vb = t.nodes_[static_cast<std::size_t>(bid)].value;
        Tensor& ga = t.grad_buf(aid);
        Tensor& gb = t.grad_buf(bid);
        for (std::size_t i = 0; i < g.data.size(); ++i) {
            ga.data[i] += g.data[i] * vb.data[i];
            gb.data[i] += g.data[i] * va.data[i];
        }
    };
    return Var{id};
}

Var Tape::scale(Var a, double s) {
    check(a, "scale");
    if (!std::isfinite(s)) throw NumericError("scale factor is non-finite");
    Tensor out = value(a);
    for (double& v : out.data) v *= s;
    int aid = a.id;
    int id = push(std::move(out), nullptr, "scale");
    nodes_.back().back = [aid, id, s](Tape& t) {
        const Tensor& g = t.nodes_[static_cast<std::size_t>(id)].grad;
        Tensor& ga = t.grad_buf(aid);
        for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * s;
    };
    return Var{id};
}

Var Tape::row_scale(Var m, Var w) {
    check(m, "row_scale");
    check(w, "row_scale");
    const Tensor& tm = value(m);
    const Tensor& tw = value(w);
    if (tm.rank() != 2 || tw.rank() != 1 || tw.shape[0] != tm.rows()) {
        throw DimError("row_scale " + tm.shape_str() + " by " + tw.shape_str());
    }
    Tensor out = tm;
    int rows = tm.rows(), cols = tm.cols();
    for (int i = 0; i < rows; ++i) {
        double s = tw.at(i);
        for (int j = 0; j < cols; ++j) out.at(i, j) *= s;
    }
    int mid = m.id, wid = w.id;
    int id = push(std::move(out), nullptr, "row_scale");
    nodes_.back().back = [mid, wid, id, rows, cols](Tape& t) {
        const Tensor& g = t.nodes_[static_cast<std::size_t>(id)].grad;
        const Tensor& vm = t.nodes_[static_cast<std::size_t>(mid)].value;
        const Tensor& vw = t.nodes_[static_cast<std::size_t>(wid)].value;
        Tensor& gm = t.grad_buf(mid);
        Tensor& gw = t.grad_buf(wid);
        for (int i = 0; i < rows; ++i) {
            double s = vw.at(i);
            double dot = 0.0;
            for (int j = 0; j < cols; ++j) {
                gm.at(i, j) += g.at(i, j) * s;
                dot += g.at(i, j) * vm.at(i, j);
            }
            gw.at(i) += dot;
        }
    };
    return Var{id};
}

Var Tape::transpose(Var a) {
    check(a, "transpose");
    const Tensor& ta = value(a);
    if (ta.rank() != 2) throw DimError("transpose on rank " + std::to_string(ta.rank()));
    Tensor out = Tensor::zeros({ta.cols(), ta.rows()});
    as_mat(out) = as_mat(ta).transpose();
    int aid = a.id;
    int id = push(std::move(out), nullptr, "transpose");
    nodes_.back().back = [aid, id](Tape& t) {
        const Tensor& g = t.nodes_[static_cast<std::size_t>(id)].grad;
        as_mat(t.grad_buf(aid)).noalias() += as_mat(g).transpose();
    };
    return Var{id};
}

Var Tape::relu(Var a) {
    check(a, "relu");
    Tensor out = value(a);
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    int aid = a.id;
    int id = push(std::move(out), nullptr, "relu");
    nodes_.back().back = [aid, id](Tape& t) {
        const Tensor& g = t.nodes_[static_cast<std::size_t>(id)].grad;
        const Tensor& va = t.nodes_[static_cast<std::size_t>(aid)].value;
        Tensor& ga = t.grad_buf(aid);
        for (std::size_t i = 0; i < g.data.size(); ++i) {
            if (va.data[i] > 0.0) ga.data[i] += g.data[i];
        }
    };
    return Var{id};
}

Var Tape::gelu(Var a) {
    check(a, "gelu");
    const Tensor& ta = value(a);
    Tensor cdf = Tensor::zeros(ta.shape);
    gauss_cdf(ta.data.data(), cdf.data.data(), ta.data.size());
    Tensor out = ta;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= cdf.data[i];
    int aid = a.id;
    int id = push(std::move(out), nullptr, "gelu");
    nodes_.back().back = [aid, id, cdf = std::move(cdf)](Tape& t) {
        const Tensor& g = t.nodes_[static_cast<std::size_t>(id)].grad;
        const Tensor& va = t.nodes_[static_cast<std::size_t>(aid)].value;
        Tensor& ga = t.grad_buf(aid);
        gelu_grad_accum(va.data.data(), cdf.data.data(), g.data.data(), ga.data.data(),
                        g.data.size());
    };
    return Var{id};
}

Var Tape::activation(Var a, Activation act) {
    return act == Activation::Relu ? relu(a) : gelu(a);
}

namespace {

// Rows of a rank-1 tensor are treated as a single row.
std::pair<int, int> row_view(const Tensor& t, const char* op) {
    if (t.rank() == 1) {
        if (t.shape[0] < 1) throw DimError(std::string(op) + " on empty vector");
        return {1, t.shape[0]};
    }
    if (t.rank() == 2) {
        if (t.cols() < 1) throw DimError(std::string(op) + " over zero columns");
        return {t.rows(), t.cols()};
    }
    throw DimError(std::string(op) + " on rank " + std::to_string(t.rank()));
}

}  // namespace

Var Tape::softmax_rows(Var a) {
    check(a, "softmax");
    const Tensor& ta = value(a);
    auto [rows, cols] = row_view(ta, "softmax");
    Tensor out = ta;
    for (int i = 0; i < rows; ++i) {
        double* r = out.data.data() + static_cast<std::size_t>(i) * cols;
        double m = r[0];
        for (int j = 1; j < cols; ++j) m = std::max(m, r[j]);
        double z = 0.0;
        for (int j = 0; j < cols; ++j) {
            r[j] = std::exp(r[j] - m);
            z += r[j];
        }
        for (int j = 0; j < cols; ++j) r[j] /= z;
    }
    int aid = a.id;
    int nr = rows, nc = cols;
    int id = push(std::move(out), nullptr, "softmax");
    nodes_.back().back = [aid, id, nr, nc](Tape& t) {
        const Tensor& g = t.nodes_[static_cast<std::size_t>(id)].grad;
        const Tensor& y = t.nodes_[static_cast<std::size_t>(id)].value;
        Tensor& ga = t.grad_buf(aid);
        for (int i = 0; i < nr; ++i) {
            const double* gr = g.data.data() + static_cast<std::size_t>(i) * nc;
            const double* yr = y.data.data() + static_cast<std::size_t>(i) * nc;
            double* gar = ga.data.data() + static_cast<std::size_t>(i) * nc;
            double dot = 0.0;
            for (int j = 0; j < nc; ++j) dot += gr[j] * yr[j];
            for (int j = 0; j < nc; ++j) gar[j] += yr[j] * (gr[j] - dot);
        }
    };
    return Var{id};
}

Var Tape::logsumexp_rows(Var a) {
    check(a, "logsumexp");
    const Tensor& ta = value(a);
    auto [rows, cols] = row_view(ta, "logsumexp");
    Tensor out = Tensor::zeros({rows});
    for (int i = 0; i < rows; ++i) {
        const double* r = ta.data.data() + static_cast<std::size_t>(i) * cols;
        double m = r[0];
        for (int j = 1; j < cols; ++j) m = std::max(m, r[j]);
        if (cols == 1) {
            out.at(i) = r[0];  // exact for a single logit
            continue;
        }
        double z = 0.0;
        for (int j = 0; j < cols; ++j) z += std::exp(r[j] - m);
        out.at(i) = m + std::log(z);
    }
    int aid = a.id;
    int nr = rows, nc = cols;
    int id = push(std::move(out), nullptr, "logsumexp");
    nodes_.back().back = [aid, id, nr, nc](Tape& t) {
        const Tensor& g = t.nodes_[static_cast<std::size_t>(id)].grad;
        const Tensor& va = t.nodes_[static_cast<std::size_t>(aid)].value;
        const Tensor& lse = t.nodes_[static_cast<std::size_t>(id)].value;
        Tensor& ga = t.grad_buf(aid);
        for (int i = 0; i < nr; ++i) {
            const double* r = va.data.data() + static_cast<std::size_t>(i) * nc;
            double* gar = ga.data.data() + static_cast<std::size_t>(i) * nc;
            double gi = g.at(i), li = lse.at(i);
            for (int j = 0; j < nc; ++j) gar[j] += gi * std::exp(r[j] - li);
        }
    };
    return Var{id};
}

Var Tape::gather_cols(Var a, const std::vector<int>& idx, int k) {
    check(a, "gather_cols");
    const Tensor& ta = value(a);
    if (ta.rank() != 2) throw DimError("gather_cols on rank " + std::to_string(ta.rank()));
    int rows = ta.rows(), cols = ta.cols();
    if (k < 1 || static_cast<std::size_t>(rows) * static_cast<std::size_t>(k) != idx.size()) {
        throw DimError("gather_cols index count mismatch");
    }
    Tensor out = Tensor::zeros({rows, k});
    for (int i = 0; i < rows; ++i) {
        for (int s = 0; s < k; ++s) {
            int j = idx[static_cast<std::size_t>(i) * k + s];
            if (j < 0 || j >= cols) throw IndexError("gather_cols column " + std::to_string(j));
            out.at(i, s) = ta.at(i, j);
        }
    }
    int aid = a.id;
    int id = push(std::move(out), nullptr, "gather_cols");
    nodes_.back().back = [aid, id, idx, k, rows](Tape& t) {
        const Tensor& g = t.nodes_[static_cast<std::size_t>(id)].grad;
        Tensor& ga = t.grad_buf(aid);
        for (int i = 0; i < rows; ++i) {
            for (int s = 0; s < k; ++s) {
                ga.at(i, idx[static_cast<std::size_t>(i) * k + s]) += g.at(i, s);
            }
        }
    };
    return Var{id};
}

Var Tape::gather_elems(Var a, const std::vector<int>& rows, const std::vector<int>& cols) {
    check(a, "gather_elems");
    const Tensor& ta = value(a);
    if (ta.rank() != 2) throw DimError("gather_elems on rank " + std::to_string(ta.rank()));
    if (rows.size() != cols.size()) throw DimError("gather_elems row/col count mismatch");
    int n = static_cast<int>(rows.size());
    Tensor out = Tensor::zeros({n});
    for (int i = 0; i < n; ++i) {
        int r = rows[static_cast<std::size_t>(i)], c = cols[static_cast<std::size_t>(i)];
        if (r < 0 || r >= ta.rows() || c < 0 || c >= ta.cols()) {
            throw IndexError("gather_elems (" + std::to_string(r) + "," + std::to_string(c) + ")");
        }
        out.at(i) = ta.at(r, c);
    }
    int aid = a.id;
    int id = push(std::move(out), nullptr, "gather_elems");
    nodes_.back().back = [aid, id, rows, cols, n](Tape& t) {
        const Tensor& g = t.nodes_[static_cast<std::size_t>(id)].grad;
        Tensor& ga = t.grad_buf(aid);
        for (int i = 0; i < n; ++i) {
            ga.at(rows[static_cast<std::size_t>(i)], cols[static_cast<std::size_t>(i)]) += g.at(i);
        }
    };
    return Var{id};
}

Var Tape::gather_elems(Var a, const std::vector<int>& idx) {
    check(a, "gather_elems");
    const Tensor& ta = value(a);
    if (ta.rank() != 1) throw DimError("rank-1 gather_elems on rank " + std::to_string(ta.rank()));
    int n = static_cast<int>(idx.size());
    Tensor out = Tensor::zeros({n});
    for (int i = 0; i < n; ++i) {
        int j = idx[static_cast<std::size_t>(i)];
        if (j < 0 || j >= ta.shape[0]) throw IndexError("gather_elems " + std::to_string(j));
        out.at(i) = ta.at(j);
    }
    int aid = a.id;
    int id = push(std::move(out), nullptr, "gather_elems");
    nodes_.back().back = [aid, id, idx, n](Tape& t) {
        const Tensor& g = t.nodes_[static_cast<std::size_t>(id)].grad;
        Tensor& ga = t.grad_buf(aid);
        for (int i = 0; i < n; ++i) ga.at(idx[static_cast<std::size_t>(i)]) += g.at(i);
    };
    return Var{id};
}

Var Tape::select_rows(Var a, const std::vector<int>& rows) {
    check(a, "select_rows");
    const Tensor& ta = value(a);
    if (ta.rank() != 2) throw DimError("select_rows on rank " + std::to_string(ta.rank()));
    int n = static_cast<int>(rows.size());
    int cols = ta.cols();
    Tensor out = Tensor::zeros({n, cols});
    for (int i = 0; i < n; ++i) {
        int r = rows[static_cast<std::size_t>(i)];
        if (r < 0 || r >= ta.rows()) throw IndexError("select_rows " + std::to_string(r));
        std::copy_n(ta.data.data() + static_cast<std::size_t>(r) * cols, cols,
                    out.data.data() + static_cast<std::size_t>(i) * cols);
    }
    int aid = a.id;
    int id = push(std::move(out), nullptr, "select_rows");
    nodes_.back().back = [aid, id, rows, n, cols](Tape& t) {
        const Tensor& g = t.nodes_[static_cast<std::size_t>(id)].grad;
        Tensor& ga = t.grad_buf(aid);
        for (int i = 0; i < n; ++i) {
            const double* gr = g.data.data() + static_cast<std::size_t>(i) * cols;
            double* gar = ga.data.data() + static_cast<std::size_t>(rows[static_cast<std::size_t>(i)]) * cols;
            for (int j = 0; j < cols; ++j) gar[j] += gr[j];
        }
    };
    return Var{id};
}

Var Tape::scatter_rows(Var a, const std::vector<int>& rows, int total_rows) {
    check(a, "scatter_rows");
    const Tensor& ta = value(a);
    if (ta.rank() != 2) throw DimError("scatter_rows on rank " + std::to_string(ta.rank()));
    if (static_cast<int>(rows.size()) != ta.rows()) throw DimError("scatter_rows index count mismatch");
    int n = ta.rows(), cols = ta.cols();
    Tensor out = Tensor::zeros({total_rows, cols});
    for (int i = 0; i < n; ++i) {
        int r = rows[static_cast<std::size_t>(i)];
        if (r < 0 || r >= total_rows) throw IndexError("scatter_rows " + std::to_string(r));
        double* orow = out.data.data() + static_cast<std::size_t>(r) * cols;
        const double* irow = ta.data.data() + static_cast<std::size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) orow[j] += irow[j];
    }
    int aid = a.id;
    int id = push(std::move(out), nullptr, "scatter_rows");
    nodes_.back().back = [aid, id, rows, n, cols](Tape& t) {
        const Tensor& g = t.nodes_[static_cast<std::size_t>(id)].grad;
        Tensor& ga = t.grad_buf(aid);
        for (int i = 0; i < n; ++i) {
            const double* gr = g.data.data() + static_cast<std::size_t>(rows[static_cast<std::size_t>(i)]) * cols;
            double* gar = ga.data.data() + static_cast<std::size_t>(i) * cols;
            for (int j = 0; j < cols; ++j) gar[j] += gr[j];
        }
    };
    return Var{id};
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimError("concat_rows of nothing");
    int cols = value(parts[0]).cols();
    int total = 0;
    std::vector<int> ids;
    ids.reserve(parts.size());
    for (Var p : parts) {
        check(p, "concat_rows");
        const Tensor& t = value(p);
        if (t.rank() != 2 || t.cols() != cols) throw DimError("concat_rows shape mismatch");
        total += t.rows();
        ids.push_back(p.id);
    }
    Tensor out = Tensor::zeros({total, cols});
    int at_row = 0;
    for (Var p : parts) {
        const Tensor& t = value(p);
        std::copy(t.data.begin(), t.data.end(),
                  out.data.begin() + static_cast<std::ptrdiff_t>(at_row) * cols);
        at_row += t.rows();
    }
    int id = push(std::move(out), nullptr, "concat_rows");
    nodes_.back().back = [ids, id, cols](Tape& t) {
        const Tensor& g = t.nodes_[static_cast<std::size_t>(id)].grad;
        int at = 0;
        for (int pid : ids) {
            Tensor& gp = t.grad_buf(pid);
            int rows = gp.rows();
            const double* src = g.data.data() + static_cast<std::size_t>(at) * cols;
            for (std::size_t i = 0; i < gp.data.size(); ++i) gp.data[i] += src[i];
            at += rows;
        }
    };
    return Var{id};
}

Var Tape::scatter_sum(const std::vector<Var>& parts, std::vector<std::vector<int>> rows,
                      int total_rows) {
    if (parts.size() != rows.size()) throw DimError("scatter_sum parts/rows mismatch");
    if (parts.empty()) throw DimError("scatter_sum of nothing");
    int cols = value(parts[0]).cols();
    std::vector<int> ids;
    ids.reserve(parts.size());
    for (std::size_t p = 0; p < parts.size(); ++p) {
        check(parts[p], "scatter_sum");
        const Tensor& t = value(parts[p]);
        if (t.rank() != 2 || t.cols() != cols) throw DimError("scatter_sum shape mismatch");
        if (static_cast<int>(rows[p].size()) != t.rows()) throw DimError("scatter_sum index count");
        for (int r : rows[p]) {
            if (r < 0 || r >= total_rows) throw IndexError("scatter_sum row " + std::to_string(r));
        }
        ids.push_back(parts[p].id);
    }
    Tensor out = Tensor::zeros({total_rows, cols});
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const Tensor& t = value(parts[p]);
        for (int i = 0; i < t.rows(); ++i) {
            double* orow = out.data.data() +
                           static_cast<std::size_t>(rows[p][static_cast<std::size_t>(i)]) * cols;
            const double* irow = t.data.data() + static_cast<std::size_t>(i) * cols;
            for (int j = 0; j < cols; ++j) orow[j] += irow[j];
        }
    }
    int id = push(std::move(out), nullptr, "scatter_sum");
    nodes_.back().back = [ids, id, rows = std::move(rows), cols](Tape& t) {
        const Tensor& g = t.nodes_[static_cast<std::size_t>(id)].grad;
        for (std::size_t p = 0; p < ids.size(); ++p) {
            Tensor& gp = t.grad_buf(ids[p]);
            for (int i = 0; i < gp.rows(); ++i) {
                const double* grow = g.data.data() +
                                     static_cast<std::size_t>(rows[p][static_cast<std::size_t>(i)]) * cols;
                double* prow = gp.data.data() + static_cast<std::size_t>(i) * cols;
                for (int j = 0; j < cols; ++j) prow[j] += grow[j];
            }
        }
    };
    return Var{id};
}

Var Tape::mean_all(Var a) {
    check(a, "mean_all");
    const Tensor& ta = value(a);
    std::int64_t n = ta.numel();
    if (n < 1) throw DimError("mean_all over empty tensor");
    double acc = 0.0;
    for (double v : ta.data) acc += v;
    Tensor out = Tensor::scalar(acc / static_cast<double>(n));
    int aid = a.id;
    int id = push(std::move(out), nullptr, "mean_all");
    nodes_.back().back = [aid, id, n](Tape& t) {
        double g = t.nodes_[static_cast<std::size_t>(id)].grad.data[0] / static_cast<double>(n);
        Tensor& ga = t.grad_buf(aid);
        for (double& v : ga.data) v += g;
    };
    return Var{id};
}

Var Tape::mean_axis0(Var a) {
    check(a, "mean_axis0");
    const Tensor& ta = value(a);
    if (ta.rank() != 2) throw DimError("mean_axis0 on rank " + std::to_string(ta.rank()));
    int rows = ta.rows(), cols = ta.cols();
    if (rows < 1) throw DimError("mean_axis0 over zero rows");
    Tensor out = Tensor::zeros({cols});
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) out.at(j) += ta.at(i, j);
    }
    for (int j = 0; j < cols; ++j) out.at(j) /= static_cast<double>(rows);
    int aid = a.id;
    int id = push(std::move(out), nullptr, "mean_axis0");
    nodes_.back().back = [aid, id, rows, cols](Tape& t) {
        const Tensor& g = t.nodes_[static_cast<std::size_t>(id)].grad;
        Tensor& ga = t.grad_buf(aid);
        for (int i = 0; i < rows; ++i) {
            for (int j = 0; j < cols; ++j) ga.at(i, j) += g.at(j) / static_cast<double>(rows);
        }
    };
    return Var{id};
}

// ------------------------------------------------------------- composed

Var Tape::cross_entropy(Var logits, const std::vector<int>& targets) {
    const Tensor& tl = value(logits);
    if (tl.rank() != 2) throw DimError("cross_entropy logits rank " + std::to_string(tl.rank()));
    if (static_cast<int>(targets.size()) != tl.rows()) throw DimError("cross_entropy target count mismatch");
    int vocab = tl.cols();
    for (int tgt : targets) {
        if (tgt < 0 || tgt >= vocab) throw IndexError("cross_entropy target " + std::to_string(tgt));
    }
    std::vector<int> row_ids(targets.size());
    for (std::size_t i = 0; i < targets.size(); ++i) row_ids[i] = static_cast<int>(i);
    Var lse = logsumexp_rows(logits);
    Var picked = gather_elems(logits, row_ids, targets);
    return mean_all(sub(lse, picked));
}

Var Tape::attention(Var q, Var k, Var v, bool causal) {
    const Tensor& tq = value(q);
    const Tensor& tk = value(k);
    if (tq.rank() != 2 || tk.rank() != 2 || tq.cols() != tk.cols()) {
        throw DimError("attention q " + tq.shape_str() + " k " + tk.shape_str());
    }
    double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(tq.cols()));
    Var scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
    if (causal) {
        int tq_rows = tq.rows(), tk_rows = tk.rows();
        Tensor mask = Tensor::zeros({tq_rows, tk_rows});
        for (int i = 0; i < tq_rows; ++i) {
            for (int j = i + 1; j < tk_rows; ++j) mask.at(i, j) = -1e30;
        }
        scores = add(scores, constant(std::move(mask)));
    }
    return matmul(softmax_rows(scores), v);
}

// ------------------------------------------------------------- backward

void Tape::backward(Var loss) {
    if (backward_done_) {
        throw TapeError("backward replayed twice without reset");
    }
    const Tensor& lv = value(loss);
    if (lv.numel() != 1) throw DimError("backward from non-scalar " + lv.shape_str());
    backward_done_ = true;
    grad_buf(loss.id).data[0] = 1.0;
    for (int i = loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (n.back && !n.grad.data.empty()) {
            n.back(*this);
        }
    }
    for (const auto& [p, id] : param_leaves_) {
        const Tensor& g = nodes_[static_cast<std::size_t>(id)].grad;
        if (g.data.empty()) continue;
        for (std::size_t i = 0; i < g.data.size(); ++i) p->grad.data[i] += g.data[i];
    }
}

}  // namespace hmoe
