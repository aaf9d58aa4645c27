#include "pandagpt/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "pandagpt/kernels.hpp"

namespace pgpt {

namespace {
constexpr double kRmsEps = 1e-5;

void check_2d(const Tensor& t, const char* op) {
    if (t.ndim() != 2) throw ShapeError(std::string(op) + ": expected 2-D tensor, got " + t.shape_str());
}

double gelu_phi(double x) { return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)); }
constexpr double kInvSqrt2Pi = 0.3989422804014327;

}  // namespace

void ensure_finite(const Tensor& t, const char* op_tag) {
    // Multiplying by zero poisons the accumulator for NaN and +-Inf while
    // staying exactly +-0 for finite inputs; the loop vectorizes.
    float acc = 0.0f;
    for (float v : t.data) acc += v * 0.0f;
    if (!(acc == 0.0f)) {
        throw NumericError(std::string("non-finite value produced by ") + op_tag);
    }
}

NodeId Graph::push(Tensor v, bool requires_grad, const char* tag) {
    ensure_finite(v, tag);
    Node n;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

Tensor& Graph::grad_buf(NodeId id) {
    Node& n = node(id);
    if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
    return n.grad;
}

void Graph::set_scalar64(NodeId id, double v) {
    node(id).scalar64 = v;
    node(id).has_scalar64 = true;
}

double Graph::value_f64(NodeId id) const {
    const Node& n = node(id);
    if (n.value.numel() != 1) throw ShapeError("value_f64: node is not scalar, shape " + n.value.shape_str());
    if (track_f64_) return n.value64[0];
    return n.has_scalar64 ? n.scalar64 : static_cast<double>(n.value.data[0]);
}

const Tensor& Graph::grad(NodeId id) { return grad_buf(id); }

NodeId Graph::input(Tensor v, bool requires_grad) {
    NodeId out = push(std::move(v), requires_grad, "input");
    if (track_f64_) {
        const Tensor& t = value(out);
        std::vector<double>& d = v64_buf(out);
        d.resize(t.data.size());
        for (size_t i = 0; i < t.data.size(); ++i) d[i] = static_cast<double>(t.data[i]);
    }
    return out;
}

NodeId Graph::matmul(NodeId a, NodeId b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    check_2d(A, "matmul");
    check_2d(B, "matmul");
    if (A.cols() != B.rows()) {
        throw ShapeError("matmul: inner extents differ, " + A.shape_str() + " vs " + B.shape_str());
    }
    const int m = A.rows(), k = A.cols(), n = B.cols();
    Tensor C({m, n});
    kernels::matmul_nn(A.data.data(), B.data.data(), C.data.data(), m, k, n);
    bool rg = requires_grad(a) || requires_grad(b);
    NodeId out = push(std::move(C), rg, "matmul");
    if (track_f64_) {
        const std::vector<double>& a64 = v64(a);
        const std::vector<double>& b64 = v64(b);
        std::vector<double>& c64 = v64_buf(out);
        c64.assign(static_cast<size_t>(m) * n, 0.0);
        for (int i = 0; i < m; ++i)
            for (int kk = 0; kk < k; ++kk) {
                const double av = a64[static_cast<size_t>(i) * k + kk];
                for (int j = 0; j < n; ++j)
                    c64[static_cast<size_t>(i) * n + j] += av * b64[static_cast<size_t>(kk) * n + j];
            }
    }
    if (rg) {
        node(out).backward_fn = [a, b, out, m, k, n](Graph& g) {
            const Tensor& dC = g.node(out).grad;
            if (g.requires_grad(a)) {
                Tensor dA({m, k});
                kernels::matmul_nt(dC.data.data(), g.value(b).data.data(), dA.data.data(), m, n, k);
                Tensor& acc = g.grad_buf(a);
                for (size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += dA.data[i];
            }
            if (g.requires_grad(b)) {
                Tensor dB({k, n});
                kernels::matmul_tn(g.value(a).data.data(), dC.data.data(), dB.data.data(), m, k, n);
                Tensor& acc = g.grad_buf(b);
                for (size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += dB.data[i];
            }
        };
    }
    return out;
}

NodeId Graph::matmul_nt(NodeId a, NodeId b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    check_2d(A, "matmul_nt");
    check_2d(B, "matmul_nt");
    if (A.cols() != B.cols()) {
        throw ShapeError("matmul_nt: inner extents differ, " + A.shape_str() + " vs " + B.shape_str());
    }
    const int m = A.rows(), k = A.cols(), n = B.rows();
    Tensor C({m, n});
    kernels::matmul_nt(A.data.data(), B.data.data(), C.data.data(), m, k, n);
    bool rg = requires_grad(a) || requires_grad(b);
    NodeId out = push(std::move(C), rg, "matmul_nt");
    if (track_f64_) {
        const std::vector<double>& a64 = v64(a);
        const std::vector<double>& b64 = v64(b);
        std::vector<double>& c64 = v64_buf(out);
        c64.assign(static_cast<size_t>(m) * n, 0.0);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int kk = 0; kk < k; ++kk)
                    acc += a64[static_cast<size_t>(i) * k + kk] * b64[static_cast<size_t>(j) * k + kk];
                c64[static_cast<size_t>(i) * n + j] = acc;
            }
    }
    if (rg) {
        node(out).backward_fn = [a, b, out, m, k, n](Graph& g) {
            const Tensor& dC = g.node(out).grad;
            if (g.requires_grad(a)) {
                Tensor dA({m, k});
                kernels::matmul_nn(dC.data.data(), g.value(b).data.data(), dA.data.data(), m, n, k);
                Tensor& acc = g.grad_buf(a);
                for (size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += dA.data[i];
            }
            if (g.requires_grad(b)) {
                Tensor dB({n, k});
                kernels::matmul_tn(dC.data.data(), g.value(a).data.data(), dB.data.data(), m, n, k);
                Tensor& acc = g.grad_buf(b);
                for (size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += dB.data[i];
            }
        };
    }
    return out;
}

NodeId Graph::transpose(NodeId a) {
    const Tensor& A = value(a);
    check_2d(A, "transpose");
    const int m = A.rows(), n = A.cols();
    Tensor T({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) T.at(j, i) = A.at(i, j);
    bool rg = requires_grad(a);
    NodeId out = push(std::move(T), rg, "transpose");
    if (track_f64_) {
        const std::vector<double>& a64 = v64(a);
        std::vector<double>& c64 = v64_buf(out);
        c64.resize(a64.size());
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                c64[static_cast<size_t>(j) * m + i] = a64[static_cast<size_t>(i) * n + j];
    }
    if (rg) {
        node(out).backward_fn = [a, out, m, n](Graph& g) {
            const Tensor& dT = g.node(out).grad;
            Tensor& acc = g.grad_buf(a);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) acc.at(i, j) += dT.at(j, i);
        };
    }
    return out;
}

NodeId Graph::add(NodeId a, NodeId b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (!A.same_shape(B)) {
        throw ShapeError("add: shape mismatch, " + A.shape_str() + " vs " + B.shape_str());
    }
    Tensor C(A.shape);
    for (size_t i = 0; i < C.data.size(); ++i) C.data[i] = A.data[i] + B.data[i];
    bool rg = requires_grad(a) || requires_grad(b);
    NodeId out = push(std::move(C), rg, "add");
    if (track_f64_) {
        const std::vector<double>& a64 = v64(a);
        const std::vector<double>& b64 = v64(b);
        std::vector<double>& c64 = v64_buf(out);
        c64.resize(a64.size());
        for (size_t i = 0; i < a64.size(); ++i) c64[i] = a64[i] + b64[i];
    }
    if (node(a).has_scalar64 && node(b).has_scalar64 && value(out).numel() == 1) {
        set_scalar64(out, node(a).scalar64 + node(b).scalar64);
    }
    if (rg) {
        node(out).backward_fn = [a, b, out](Graph& g) {
            const Tensor& dC = g.node(out).grad;
            if (g.requires_grad(a)) {
                Tensor& acc = g.grad_buf(a);
                for (size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += dC.data[i];
            }
            if (g.requires_grad(b)) {
                Tensor& acc = g.grad_buf(b);
                for (size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += dC.data[i];
            }
        };
    }
    return out;
}

NodeId Graph::add_bias(NodeId a, NodeId bias) {
    const Tensor& A = value(a);
    const Tensor& B = value(bias);
    check_2d(A, "add_bias");
    if (B.ndim() != 1 || B.shape[0] != A.cols()) {
        throw ShapeError("add_bias: bias " + B.shape_str() + " does not match " + A.shape_str());
    }
    const int m = A.rows(), n = A.cols();
    Tensor C({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) C.at(i, j) = A.at(i, j) + B.at(j);
    bool rg = requires_grad(a) || requires_grad(bias);
    NodeId out = push(std::move(C), rg, "add_bias");
    if (track_f64_) {
        const std::vector<double>& a64 = v64(a);
        const std::vector<double>& b64 = v64(bias);
        std::vector<double>& c64 = v64_buf(out);
        c64.resize(a64.size());
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                c64[static_cast<size_t>(i) * n + j] = a64[static_cast<size_t>(i) * n + j] + b64[static_cast<size_t>(j)];
    }
    if (rg) {
        node(out).backward_fn = [a, bias, out, m, n](Graph& g) {
            const Tensor& dC = g.node(out).grad;
            if (g.requires_grad(a)) {
                Tensor& acc = g.grad_buf(a);
                for (size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += dC.data[i];
            }
            if (g.requires_grad(bias)) {
                Tensor& acc = g.grad_buf(bias);
                for (int j = 0; j < n; ++j) {
                    double s = 0.0;
                    for (int i = 0; i < m; ++i) s += static_cast<double>(dC.at(i, j));
                    acc.at(j) += static_cast<float>(s);
                }
            }
        };
    }
    return out;
}

NodeId Graph::scale(NodeId a, double c) {
    const Tensor& A = value(a);
    Tensor C(A.shape);
    for (size_t i = 0; i < C.data.size(); ++i)
        C.data[i] = static_cast<float>(static_cast<double>(A.data[i]) * c);
    bool rg = requires_grad(a);
    NodeId out = push(std::move(C), rg, "scale");
    if (track_f64_) {
        const std::vector<double>& a64 = v64(a);
        std::vector<double>& c64 = v64_buf(out);
        c64.resize(a64.size());
        for (size_t i = 0; i < a64.size(); ++i) c64[i] = a64[i] * c;
    }
    if (node(a).has_scalar64 && value(out).numel() == 1) set_scalar64(out, node(a).scalar64 * c);
    if (rg) {
        node(out).backward_fn = [a, out, c](Graph& g) {
            const Tensor& dC = g.node(out).grad;
            Tensor& acc = g.grad_buf(a);
            for (size_t i = 0; i < acc.data.size(); ++i)
                acc.data[i] += static_cast<float>(static_cast<double>(dC.data[i]) * c);
        };
    }
    return out;
}

NodeId Graph::tanh_act(NodeId a) {
    const Tensor& A = value(a);
    Tensor C(A.shape);
    for (size_t i = 0; i < C.data.size(); ++i)
        C.data[i] = static_cast<float>(std::tanh(static_cast<double>(A.data[i])));
    bool rg = requires_grad(a);
    NodeId out = push(std::move(C), rg, "tanh");
    if (track_f64_) {
        const std::vector<double>& a64 = v64(a);
        std::vector<double>& c64 = v64_buf(out);
        c64.resize(a64.size());
        for (size_t i = 0; i < a64.size(); ++i) c64[i] = std::tanh(a64[i]);
    }
    if (rg) {
        node(out).backward_fn = [a, out](Graph& g) {
            const Tensor& dC = g.node(out).grad;
            const Tensor& Y = g.value(out);
            Tensor& acc = g.grad_buf(a);
            for (size_t i = 0; i < acc.data.size(); ++i) {
                const double y = Y.data[i];
                acc.data[i] += static_cast<float>(static_cast<double>(dC.data[i]) * (1.0 - y * y));
            }
        };
    }
    return out;
}

NodeId Graph::gelu(NodeId a) {
    const Tensor& A = value(a);
    Tensor C(A.shape);
    for (size_t i = 0; i < C.data.size(); ++i) {
        const double x = A.data[i];
        C.data[i] = static_cast<float>(x * gelu_phi(x));
    }
    bool rg = requires_grad(a);
    NodeId out = push(std::move(C), rg, "gelu");
    if (track_f64_) {
        const std::vector<double>& a64 = v64(a);
        std::vector<double>& c64 = v64_buf(out);
        c64.resize(a64.size());
        for (size_t i = 0; i < a64.size(); ++i) c64[i] = a64[i] * gelu_phi(a64[i]);
    }
    if (rg) {
        node(out).backward_fn = [a, out](Graph& g) {
            const Tensor& dC = g.node(out).grad;
            const Tensor& X = g.value(a);
            Tensor& acc = g.grad_buf(a);
            for (size_t i = 0; i < acc.data.size(); ++i) {
                const double x = X.data[i];
                const double dens = std::exp(-0.5 * x * x) * kInvSqrt2Pi;
                acc.data[i] += static_cast<float>(static_cast<double>(dC.data[i]) * (gelu_phi(x) + x * dens));
            }
        };
    }
    return out;
}

namespace {
void softmax_rows64(const std::vector<double>& x, std::vector<double>& y, int rows, int cols) {
    y.resize(x.size());
    for (int i = 0; i < rows; ++i) {
        const double* row = x.data() + static_cast<size_t>(i) * cols;
        double* yrow = y.data() + static_cast<size_t>(i) * cols;
        double mx = row[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < cols; ++j) {
            yrow[j] = std::exp(row[j] - mx);
            sum += yrow[j];
        }
        const double inv = 1.0 / sum;
        for (int j = 0; j < cols; ++j) yrow[j] *= inv;
    }
}
}  // namespace

NodeId Graph::softmax_rows(NodeId a) {
    const Tensor& A = value(a);
    check_2d(A, "softmax");
    const int m = A.rows(), n = A.cols();
    Tensor C({m, n});
    kernels::softmax_rows(A.data.data(), C.data.data(), m, n);
    bool rg = requires_grad(a);
    NodeId out = push(std::move(C), rg, "softmax");
    if (track_f64_) softmax_rows64(v64(a), v64_buf(out), m, n);
    if (rg) {
        node(out).backward_fn = [a, out, m, n](Graph& g) {
            const Tensor& dC = g.node(out).grad;
            const Tensor& Y = g.value(out);
            Tensor& acc = g.grad_buf(a);
            for (int i = 0; i < m; ++i) {
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += static_cast<double>(dC.at(i, j)) * static_cast<double>(Y.at(i, j));
                for (int j = 0; j < n; ++j)
                    acc.at(i, j) += static_cast<float>(static_cast<double>(Y.at(i, j)) *
                                                       (static_cast<double>(dC.at(i, j)) - dot));
            }
        };
    }
    return out;
}

NodeId Graph::softmax(NodeId a, int axis) {
    const Tensor& A = value(a);
    if (A.ndim() == 1) {
        if (axis != 0 && axis != -1) {
            throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " + A.shape_str());
        }
        const int n = A.shape[0];
        Tensor C({n});
        kernels::softmax_rows(A.data.data(), C.data.data(), 1, n);
        bool rg = requires_grad(a);
        NodeId out = push(std::move(C), rg, "softmax");
        if (track_f64_) softmax_rows64(v64(a), v64_buf(out), 1, n);
        if (rg) {
            node(out).backward_fn = [a, out, n](Graph& g) {
                const Tensor& dC = g.node(out).grad;
                const Tensor& Y = g.value(out);
                Tensor& acc = g.grad_buf(a);
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += static_cast<double>(dC.at(j)) * static_cast<double>(Y.at(j));
                for (int j = 0; j < n; ++j)
                    acc.at(j) += static_cast<float>(static_cast<double>(Y.at(j)) *
                                                    (static_cast<double>(dC.at(j)) - dot));
            };
        }
        return out;
    }
    check_2d(A, "softmax");
    if (axis == 1 || axis == -1) return softmax_rows(a);
    if (axis == 0) return transpose(softmax_rows(transpose(a)));
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " + A.shape_str());
}

NodeId Graph::rmsnorm_rows(NodeId x, NodeId gain) {
    const Tensor& X = value(x);
    const Tensor& G = value(gain);
    check_2d(X, "rmsnorm");
    if (G.ndim() != 1 || G.shape[0] != X.cols()) {
        throw ShapeError("rmsnorm: gain " + G.shape_str() + " does not match " + X.shape_str());
    }
    const int m = X.rows(), n = X.cols();
    Tensor C({m, n});
    for (int i = 0; i < m; ++i) {
        double ms = 0.0;
        for (int j = 0; j < n; ++j) {
            const double v = X.at(i, j);
            ms += v * v;
        }
        const double r = std::sqrt(ms / n + kRmsEps);
        for (int j = 0; j < n; ++j)
            C.at(i, j) = static_cast<float>(static_cast<double>(G.at(j)) * static_cast<double>(X.at(i, j)) / r);
    }
    bool rg = requires_grad(x) || requires_grad(gain);
    NodeId out = push(std::move(C), rg, "rmsnorm");
    if (track_f64_) {
        const std::vector<double>& x64 = v64(x);
        const std::vector<double>& g64 = v64(gain);
        std::vector<double>& c64 = v64_buf(out);
        c64.resize(x64.size());
        for (int i = 0; i < m; ++i) {
            double ms = 0.0;
            for (int j = 0; j < n; ++j) {
                const double v = x64[static_cast<size_t>(i) * n + j];
                ms += v * v;
            }
            const double r = std::sqrt(ms / n + kRmsEps);
            for (int j = 0; j < n; ++j)
                c64[static_cast<size_t>(i) * n + j] =
                    g64[static_cast<size_t>(j)] * x64[static_cast<size_t>(i) * n + j] / r;
        }
    }
    if (rg) {
        node(out).backward_fn = [x, gain, out, m, n](Graph& g) {
            const Tensor& dC = g.node(out).grad;
            const Tensor& X2 = g.value(x);
            const Tensor& G2 = g.value(gain);
            const bool need_dx = g.requires_grad(x);
            const bool need_dg = g.requires_grad(gain);
            std::vector<double> dg(need_dg ? static_cast<size_t>(n) : 0, 0.0);
            for (int i = 0; i < m; ++i) {
                double ms = 0.0;
                for (int j = 0; j < n; ++j) {
                    const double v = X2.at(i, j);
                    ms += v * v;
                }
                const double r = std::sqrt(ms / n + kRmsEps);
                if (need_dg) {
                    for (int j = 0; j < n; ++j)
                        dg[static_cast<size_t>(j)] +=
                            static_cast<double>(dC.at(i, j)) * static_cast<double>(X2.at(i, j)) / r;
                }
                if (need_dx) {
                    double s = 0.0;
                    for (int j = 0; j < n; ++j) {
                        const double du = static_cast<double>(dC.at(i, j)) * static_cast<double>(G2.at(j));
                        s += du * (static_cast<double>(X2.at(i, j)) / r);
                    }
                    Tensor& acc = g.grad_buf(x);
                    for (int j = 0; j < n; ++j) {
                        const double u = static_cast<double>(X2.at(i, j)) / r;
                        const double du = static_cast<double>(dC.at(i, j)) * static_cast<double>(G2.at(j));
                        acc.at(i, j) += static_cast<float>((du - u * s / n) / r);
                    }
                }
            }
            if (need_dg) {
                Tensor& acc = g.grad_buf(gain);
                for (int j = 0; j < n; ++j) acc.at(j) += static_cast<float>(dg[static_cast<size_t>(j)]);
            }
        };
    }
    return out;
}

NodeId Graph::l2normalize_rows(NodeId a) {
    const Tensor& A = value(a);
    check_2d(A, "l2normalize");
    const int m = A.rows(), n = A.cols();
    Tensor C({m, n});
    for (int i = 0; i < m; ++i) {
        double ss = 0.0;
        for (int j = 0; j < n; ++j) {
            const double v = A.at(i, j);
            ss += v * v;
        }
        const double nrm = std::sqrt(ss);
        if (nrm < 1e-12) throw NumericError("l2normalize: row norm below 1e-12");
        for (int j = 0; j < n; ++j) C.at(i, j) = static_cast<float>(static_cast<double>(A.at(i, j)) / nrm);
    }
    bool rg = requires_grad(a);
    NodeId out = push(std::move(C), rg, "l2normalize");
    if (track_f64_) {
        const std::vector<double>& a64 = v64(a);
        std::vector<double>& c64 = v64_buf(out);
        c64.resize(a64.size());
        for (int i = 0; i < m; ++i) {
            double ss = 0.0;
            for (int j = 0; j < n; ++j) {
                const double v = a64[static_cast<size_t>(i) * n + j];
                ss += v * v;
            }
            const double nrm = std::sqrt(ss);
            for (int j = 0; j < n; ++j)
                c64[static_cast<size_t>(i) * n + j] = a64[static_cast<size_t>(i) * n + j] / nrm;
        }
    }
    if (rg) {
        node(out).backward_fn = [a, out, m, n](Graph& g) {
            const Tensor& dC = g.node(out).grad;
            const Tensor& X = g.value(a);
            const Tensor& Y = g.value(out);
            Tensor& acc = g.grad_buf(a);
            for (int i = 0; i < m; ++i) {
                double ss = 0.0;
                for (int j = 0; j < n; ++j) {
                    const double v = X.at(i, j);
                    ss += v * v;
                }
                const double nrm = std::sqrt(ss);
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += static_cast<double>(dC.at(i, j)) * static_cast<double>(Y.at(i, j));
                for (int j = 0; j < n; ++j)
                    acc.at(i, j) += static_cast<float>((static_cast<double>(dC.at(i, j)) -
                                                       static_cast<double>(Y.at(i, j)) * dot) / nrm);
            }
        };
    }
    return out;
}

NodeId Graph::gather_rows(NodeId table, std::vector<int> ids) {
    const Tensor& T = value(table);
    check_2d(T, "gather_rows");
    const int v = T.rows(), d = T.cols();
    for (int id : ids) {
        if (id < 0 || id >= v) {
            throw ShapeError("gather_rows: index " + std::to_string(id) + " out of range [0," +
                             std::to_string(v) + ")");
        }
    }
    const int t = static_cast<int>(ids.size());
    if (t == 0) throw ShapeError("gather_rows: empty index list");
    Tensor C({t, d});
    for (int i = 0; i < t; ++i)
        std::memcpy(&C.at(i, 0), &T.at(ids[static_cast<size_t>(i)], 0), sizeof(float) * static_cast<size_t>(d));
    bool rg = requires_grad(table);
    NodeId out = push(std::move(C), rg, "gather_rows");
    if (track_f64_) {
        const std::vector<double>& t64 = v64(table);
        std::vector<double>& c64 = v64_buf(out);
        c64.resize(static_cast<size_t>(t) * d);
        for (int i = 0; i < t; ++i)
            for (int j = 0; j < d; ++j)
                c64[static_cast<size_t>(i) * d + j] =
                    t64[static_cast<size_t>(ids[static_cast<size_t>(i)]) * d + j];
    }
    if (rg) {
        node(out).backward_fn = [table, out, ids = std::move(ids), d](Graph& g) {
            const Tensor& dC = g.node(out).grad;
            Tensor& acc = g.grad_buf(table);
            for (size_t i = 0; i < ids.size(); ++i)
                for (int j = 0; j < d; ++j)
                    acc.at(ids[i], j) += dC.at(static_cast<int>(i), j);
        };
    }
    return out;
}

NodeId Graph::slice_rows(NodeId a, int r0, int h) {
    const Tensor& A = value(a);
    check_2d(A, "slice_rows");
    if (r0 < 0 || h <= 0 || r0 + h > A.rows()) {
        throw ShapeError("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r0 + h) +
                         ") out of " + A.shape_str());
    }
    const int n = A.cols();
    Tensor C({h, n});
    std::memcpy(C.data.data(), &A.at(r0, 0), sizeof(float) * static_cast<size_t>(h) * n);
    bool rg = requires_grad(a);
    NodeId out = push(std::move(C), rg, "slice_rows");
    if (track_f64_) {
        const std::vector<double>& a64 = v64(a);
        std::vector<double>& c64 = v64_buf(out);
        c64.assign(a64.begin() + static_cast<size_t>(r0) * n,
                   a64.begin() + static_cast<size_t>(r0 + h) * n);
    }
    if (rg) {
        node(out).backward_fn = [a, out, r0, h, n](Graph& g) {
            const Tensor& dC = g.node(out).grad;
            Tensor& acc = g.grad_buf(a);
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < n; ++j) acc.at(r0 + i, j) += dC.at(i, j);
        };
    }
    return out;
}

NodeId Graph::slice_cols(NodeId a, int c0, int w) {
    const Tensor& A = value(a);
    check_2d(A, "slice_cols");
    if (c0 < 0 || w <= 0 || c0 + w > A.cols()) {
        throw ShapeError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c0 + w) +
                         ") out of " + A.shape_str());
    }
    const int m = A.rows(), n = A.cols();
    Tensor C({m, w});
    for (int i = 0; i < m; ++i)
        std::memcpy(&C.at(i, 0), &A.at(i, c0), sizeof(float) * static_cast<size_t>(w));
    bool rg = requires_grad(a);
    NodeId out = push(std::move(C), rg, "slice_cols");
    if (track_f64_) {
        const std::vector<double>& a64 = v64(a);
        std::vector<double>& c64 = v64_buf(out);
        c64.resize(static_cast<size_t>(m) * w);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
                c64[static_cast<size_t>(i) * w + j] = a64[static_cast<size_t>(i) * n + c0 + j];
    }
    if (rg) {
        node(out).backward_fn = [a, out, c0, w, m](Graph& g) {
            const Tensor& dC = g.node(out).grad;
            Tensor& acc = g.grad_buf(a);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < w; ++j) acc.at(i, c0 + j) += dC.at(i, j);
        };
    }
    return out;
}

NodeId Graph::concat_rows(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no parts");
    const int n = value(parts[0]).cols();
    int m = 0;
    bool rg = false;
    for (NodeId p : parts) {
        const Tensor& P = value(p);
        check_2d(P, "concat_rows");
        if (P.cols() != n) {
            throw ShapeError("concat_rows: column mismatch, " + P.shape_str() + " vs " +
                             value(parts[0]).shape_str());
        }
        m += P.rows();
        rg = rg || requires_grad(p);
    }
    Tensor C({m, n});
    int r = 0;
    for (NodeId p : parts) {
        const Tensor& P = value(p);
        std::memcpy(&C.at(r, 0), P.data.data(), sizeof(float) * P.data.size());
        r += P.rows();
    }
    NodeId out = push(std::move(C), rg, "concat_rows");
    if (track_f64_) {
        std::vector<double>& c64 = v64_buf(out);
        c64.clear();
        c64.reserve(static_cast<size_t>(m) * n);
        for (NodeId p : parts) {
            const std::vector<double>& p64 = v64(p);
            c64.insert(c64.end(), p64.begin(), p64.end());
        }
    }
    if (rg) {
        node(out).backward_fn = [parts, out, n](Graph& g) {
            const Tensor& dC = g.node(out).grad;
            int r0 = 0;
            for (NodeId p : parts) {
                const int h = g.value(p).rows();
                if (g.requires_grad(p)) {
                    Tensor& acc = g.grad_buf(p);
                    for (int i = 0; i < h; ++i)
                        for (int j = 0; j < n; ++j) acc.at(i, j) += dC.at(r0 + i, j);
                }
                r0 += h;
            }
        };
    }
    return out;
}

NodeId Graph::concat_cols(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no parts");
    const int m = value(parts[0]).rows();
    int n = 0;
    bool rg = false;
    for (NodeId p : parts) {
        const Tensor& P = value(p);
        check_2d(P, "concat_cols");
        if (P.rows() != m) {
            throw ShapeError("concat_cols: row mismatch, " + P.shape_str() + " vs " +
                             value(parts[0]).shape_str());
        }
        n += P.cols();
        rg = rg || requires_grad(p);
    }
    Tensor C({m, n});
    int c = 0;
    for (NodeId p : parts) {
        const Tensor& P = value(p);
        for (int i = 0; i < m; ++i)
            std::memcpy(&C.at(i, c), &P.at(i, 0), sizeof(float) * static_cast<size_t>(P.cols()));
        c += P.cols();
    }
    NodeId out = push(std::move(C), rg, "concat_cols");
    if (track_f64_) {
        std::vector<double>& c64 = v64_buf(out);
        c64.resize(static_cast<size_t>(m) * n);
        int c0 = 0;
        for (NodeId p : parts) {
            const Tensor& P = value(p);
            const std::vector<double>& p64 = v64(p);
            const int w = P.cols();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < w; ++j)
                    c64[static_cast<size_t>(i) * n + c0 + j] = p64[static_cast<size_t>(i) * w + j];
            c0 += w;
        }
    }
    if (rg) {
        node(out).backward_fn = [parts, out, m](Graph& g) {
            const Tensor& dC = g.node(out).grad;
            int c0 = 0;
            for (NodeId p : parts) {
                const int w = g.value(p).cols();
                if (g.requires_grad(p)) {
                    Tensor& acc = g.grad_buf(p);
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < w; ++j) acc.at(i, j) += dC.at(i, c0 + j);
                }
                c0 += w;
            }
        };
    }
    return out;
}

NodeId Graph::mean_rows(NodeId a) {
    const Tensor& A = value(a);
    check_2d(A, "mean_rows");
    const int m = A.rows(), n = A.cols();
    Tensor C({1, n});
    for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int i = 0; i < m; ++i) s += static_cast<double>(A.at(i, j));
        C.at(0, j) = static_cast<float>(s / m);
    }
    bool rg = requires_grad(a);
    NodeId out = push(std::move(C), rg, "mean_rows");
    if (track_f64_) {
        const std::vector<double>& a64 = v64(a);
        std::vector<double>& c64 = v64_buf(out);
        c64.assign(static_cast<size_t>(n), 0.0);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) c64[static_cast<size_t>(j)] += a64[static_cast<size_t>(i) * n + j];
        for (int j = 0; j < n; ++j) c64[static_cast<size_t>(j)] /= m;
    }
    if (rg) {
        node(out).backward_fn = [a, out, m, n](Graph& g) {
            const Tensor& dC = g.node(out).grad;
            Tensor& acc = g.grad_buf(a);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    acc.at(i, j) += static_cast<float>(static_cast<double>(dC.at(0, j)) / m);
        };
    }
    return out;
}

NodeId Graph::masked_cross_entropy(NodeId logits, std::vector<int> targets, std::vector<uint8_t> mask) {
    const Tensor& L = value(logits);
    check_2d(L, "masked_cross_entropy");
    const int t = L.rows(), v = L.cols();
    if (static_cast<int>(targets.size()) != t || static_cast<int>(mask.size()) != t) {
        throw ShapeError("masked_cross_entropy: logits " + L.shape_str() + " need " + std::to_string(t) +
                         " targets/mask entries, got " + std::to_string(targets.size()) + "/" +
                         std::to_string(mask.size()));
    }
    int64_t m_count = 0;
    for (int i = 0; i < t; ++i) {
        if (mask[static_cast<size_t>(i)]) {
            m_count += 1;
            const int tg = targets[static_cast<size_t>(i)];
            if (tg < 0 || tg >= v) {
                throw ShapeError("masked_cross_entropy: target " + std::to_string(tg) +
                                 " out of [0," + std::to_string(v) + ")");
            }
        }
    }
    if (m_count == 0) throw ShapeError("masked_cross_entropy: all-zero mask (degenerate objective)");

    auto row_nll = [&](auto get) {
        double total = 0.0;
        for (int i = 0; i < t; ++i) {
            if (!mask[static_cast<size_t>(i)]) continue;
            double mx = get(i, 0);
            for (int j = 1; j < v; ++j) mx = std::max(mx, get(i, j));
            double sum = 0.0;
            for (int j = 0; j < v; ++j) sum += std::exp(get(i, j) - mx);
            total += mx + std::log(sum) - get(i, targets[static_cast<size_t>(i)]);
        }
        return total / static_cast<double>(m_count);
    };
    const double mean = row_nll([&](int i, int j) { return static_cast<double>(L.at(i, j)); });

    bool rg = requires_grad(logits);
    NodeId out = push(Tensor::scalar(static_cast<float>(mean)), rg, "masked_cross_entropy");
    set_scalar64(out, mean);
    if (track_f64_) {
        const std::vector<double>& l64 = v64(logits);
        v64_buf(out).assign(
            1, row_nll([&](int i, int j) { return l64[static_cast<size_t>(i) * v + j]; }));
    }
    if (rg) {
        node(out).backward_fn = [logits, out, targets = std::move(targets), mask = std::move(mask),
                                 t, v, m_count](Graph& g) {
            const double go = static_cast<double>(g.node(out).grad.data[0]) / static_cast<double>(m_count);
            const Tensor& L2 = g.value(logits);
            Tensor& acc = g.grad_buf(logits);
            for (int i = 0; i < t; ++i) {
                if (!mask[static_cast<size_t>(i)]) continue;
                const float* row = &L2.at(i, 0);
                float mx = row[0];
                for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
                double sum = 0.0;
                for (int j = 0; j < v; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
                const double inv = 1.0 / sum;
                for (int j = 0; j < v; ++j) {
                    double p = std::exp(static_cast<double>(row[j]) - mx) * inv;
                    if (j == targets[static_cast<size_t>(i)]) p -= 1.0;
                    acc.at(i, j) += static_cast<float>(p * go);
                }
            }
        };
    }
    return out;
}

void Graph::backward(NodeId root) {
    const Tensor& rv = value(root);
    if (rv.numel() != 1) {
        throw ShapeError("backward: root must be scalar, got " + rv.shape_str());
    }
    grad_buf(root).data[0] = 1.0f;
    for (NodeId i = root; i >= 0; --i) {
        Node& n = node(i);
        if (!n.requires_grad || n.grad.data.empty() || !n.backward_fn) continue;
        n.backward_fn(*this);
    }
    // Leaf gradients are what callers consume; a NaN here must not escape.
    for (NodeId i = 0; i <= root; ++i) {
        Node& n = node(i);
        if (n.requires_grad && !n.backward_fn && !n.grad.data.empty()) {
            ensure_finite(n.grad, "backward");
        }
    }
}

}  // namespace pgpt
