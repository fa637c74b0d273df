#include "pipeplan/tinynet.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

namespace pipeplan {

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) throw std::invalid_argument("matmul: inner dimensions disagree");
    Matrix c(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        for (int j = 0; j < b.cols; ++j) {
            double acc = 0.0;
            for (int k = 0; k < a.cols; ++k) acc += a.at(i, k) * b.at(k, j);
            c.at(i, j) = acc;
        }
    }
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols != b.cols) throw std::invalid_argument("matmul_nt: inner dimensions disagree");
    Matrix c(a.rows, b.rows);
    for (int i = 0; i < a.rows; ++i) {
        for (int j = 0; j < b.rows; ++j) {
            double acc = 0.0;
            for (int k = 0; k < a.cols; ++k) acc += a.at(i, k) * b.at(j, k);
            c.at(i, j) = acc;
        }
    }
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows) throw std::invalid_argument("matmul_tn: inner dimensions disagree");
    Matrix c(a.cols, b.cols);
    for (int i = 0; i < a.cols; ++i) {
        for (int j = 0; j < b.cols; ++j) {
            double acc = 0.0;
            for (int k = 0; k < a.rows; ++k) acc += a.at(k, i) * b.at(k, j);
            c.at(i, j) = acc;
        }
    }
    return c;
}

Matrix slice_cols(const Matrix& a, int lo, int hi) {
    if (lo < 0 || hi > a.cols || lo >= hi) throw std::out_of_range("slice_cols: bad range");
    Matrix c(a.rows, hi - lo);
    for (int i = 0; i < a.rows; ++i) {
        for (int j = lo; j < hi; ++j) c.at(i, j - lo) = a.at(i, j);
    }
    return c;
}

Matrix slice_rows(const Matrix& a, int lo, int hi) {
    if (lo < 0 || hi > a.rows || lo >= hi) throw std::out_of_range("slice_rows: bad range");
    Matrix c(hi - lo, a.cols);
    for (int i = lo; i < hi; ++i) {
        for (int j = 0; j < a.cols; ++j) c.at(i - lo, j) = a.at(i, j);
    }
    return c;
}

void paste_cols(Matrix& dst, const Matrix& src, int lo) {
    if (dst.rows != src.rows || lo + src.cols > dst.cols) {
        throw std::out_of_range("paste_cols: bad range");
    }
    for (int i = 0; i < src.rows; ++i) {
        for (int j = 0; j < src.cols; ++j) dst.at(i, lo + j) = src.at(i, j);
    }
}

void paste_rows(Matrix& dst, const Matrix& src, int lo) {
    if (dst.cols != src.cols || lo + src.rows > dst.rows) {
        throw std::out_of_range("paste_rows: bad range");
    }
    for (int i = 0; i < src.rows; ++i) {
        for (int j = 0; j < src.cols; ++j) dst.at(lo + i, j) = src.at(i, j);
    }
}

std::vector<double> col_sums(const Matrix& a) {
    std::vector<double> s(static_cast<size_t>(a.cols), 0.0);
    for (int i = 0; i < a.rows; ++i) {
        for (int j = 0; j < a.cols; ++j) s[static_cast<size_t>(j)] += a.at(i, j);
    }
    return s;
}

namespace {

Matrix apply_activation(const Matrix& q, ActKind act) {
    Matrix a = q;
    switch (act) {
        case ActKind::identity:
            break;
        case ActKind::relu:
            for (double& x : a.v) x = x > 0.0 ? x : 0.0;
            break;
        case ActKind::softmax_last:
            for (int i = 0; i < a.rows; ++i) {
                double mx = a.at(i, 0);
                for (int j = 1; j < a.cols; ++j) mx = std::max(mx, a.at(i, j));
                double sum = 0.0;
                for (int j = 0; j < a.cols; ++j) {
                    a.at(i, j) = std::exp(a.at(i, j) - mx);
                    sum += a.at(i, j);
                }
                for (int j = 0; j < a.cols; ++j) a.at(i, j) /= sum;
            }
            break;
    }
    return a;
}

Matrix mse_targets(const std::vector<int>& labels, int dim) {
    Matrix t(static_cast<int>(labels.size()), dim);
    for (size_t s = 0; s < labels.size(); ++s) {
        if (dim == 1) {
            t.at(static_cast<int>(s), 0) = static_cast<double>(labels[s]);
        } else {
            if (labels[s] < 0 || labels[s] >= dim) {
                throw std::invalid_argument("label out of range for one-hot target");
            }
            t.at(static_cast<int>(s), labels[s]) = 1.0;
        }
    }
    return t;
}

bool rows_are_probabilities(const Matrix& m) {
    for (int i = 0; i < m.rows; ++i) {
        double sum = 0.0;
        for (int j = 0; j < m.cols; ++j) {
            const double x = m.at(i, j);
            if (x < 0.0 || x > 1.0 + 1e-9) return false;
            sum += x;
        }
        if (std::abs(sum - 1.0) > 1e-6) return false;
    }
    return true;
}

}  // namespace

void validate_net(const TinyNet& net) {
    if (net.layers.empty()) throw std::invalid_argument("net must have at least one layer");
    for (int l = 0; l < net.num_layers(); ++l) {
        const TinyLayer& layer = net.layers[static_cast<size_t>(l)];
        if (layer.fan_in() < 1 || layer.fan_out() < 1) {
            throw std::invalid_argument("layer " + std::to_string(l + 1) + ": empty weight matrix");
        }
        if (static_cast<int>(layer.bias.size()) != layer.fan_out()) {
            throw std::invalid_argument("layer " + std::to_string(l + 1) + ": bias size mismatch");
        }
        if (l > 0 && net.layers[static_cast<size_t>(l - 1)].fan_out() != layer.fan_in()) {
            throw std::invalid_argument("layers " + std::to_string(l) + "," + std::to_string(l + 1) +
                                        ": shape chain broken");
        }
        if (layer.act == ActKind::softmax_last && l != net.num_layers() - 1) {
            throw std::invalid_argument("softmax is only valid on the last layer");
        }
        for (double x : layer.weights.v) {
            if (!std::isfinite(x)) throw std::invalid_argument("non-finite weight");
        }
        for (double x : layer.bias) {
            if (!std::isfinite(x)) throw std::invalid_argument("non-finite bias");
        }
    }
}

TinyNet init_net(const std::vector<int>& dims, const std::vector<ActKind>& acts,
                 std::uint64_t seed) {
    if (dims.size() < 2 || acts.size() != dims.size() - 1) {
        throw std::invalid_argument("init_net: dims must list input plus one width per layer");
    }
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(-0.5, 0.5);
    TinyNet net;
    for (size_t l = 0; l + 1 < dims.size(); ++l) {
        TinyLayer layer;
        layer.weights = Matrix(dims[l + 1], dims[l]);
        const double scale = 1.0 / std::sqrt(static_cast<double>(dims[l]));
        for (double& x : layer.weights.v) x = uni(rng) * scale;
        layer.bias.assign(static_cast<size_t>(dims[l + 1]), 0.0);
        for (double& x : layer.bias) x = uni(rng) * scale;
        layer.act = acts[l];
        net.layers.push_back(std::move(layer));
    }
    validate_net(net);
    return net;
}

ActivationTape forward(const TinyNet& net, const Matrix& X) {
    if (X.cols != net.input_dim()) {
        throw std::invalid_argument("input has " + std::to_string(X.cols) + " features, layer 1 expects " +
                                    std::to_string(net.input_dim()));
    }
    ActivationTape tape;
    tape.a.push_back(X);
    for (const TinyLayer& layer : net.layers) {
        Matrix q = matmul_nt(tape.a.back(), layer.weights);
        for (int i = 0; i < q.rows; ++i) {
            for (int j = 0; j < q.cols; ++j) q.at(i, j) += layer.bias[static_cast<size_t>(j)];
        }
        tape.q.push_back(q);
        tape.a.push_back(apply_activation(q, layer.act));
    }
    return tape;
}

double loss_sum(const Matrix& output, const std::vector<int>& labels, LossKind kind) {
    if (output.rows != static_cast<int>(labels.size())) {
        throw std::invalid_argument("output rows and label count disagree");
    }
    const int b = output.rows;
    double sum = 0.0;
    if (kind == LossKind::mse) {
        const Matrix targets = mse_targets(labels, output.cols);
        for (int i = 0; i < b; ++i) {
            for (int j = 0; j < output.cols; ++j) {
                const double d = output.at(i, j) - targets.at(i, j);
                sum += 0.5 * d * d;
            }
        }
    } else {
        if (!rows_are_probabilities(output)) {
            throw std::runtime_error("cross_entropy needs probability outputs (softmax last layer required)");
        }
        for (int i = 0; i < b; ++i) {
            const int lbl = labels[static_cast<size_t>(i)];
            if (lbl < 0 || lbl >= output.cols) throw std::invalid_argument("label out of range");
            sum += -std::log(std::max(output.at(i, lbl), 1e-300));
        }
    }
    return sum;
}

double loss_value(const Matrix& output, const std::vector<int>& labels, LossKind kind) {
    return loss_sum(output, labels, kind) / output.rows;
}

namespace {

Matrix relu_mask_mul(const Matrix& grad, const Matrix& q) {
    Matrix out = grad;
    for (size_t i = 0; i < out.v.size(); ++i) {
        if (q.v[i] <= 0.0) out.v[i] = 0.0;
    }
    return out;
}

// dL/dq of the last layer under the sum (not yet batch-mean) convention.
Matrix output_delta(const TinyNet& net, const ActivationTape& tape, const std::vector<int>& labels,
                    LossKind kind) {
    const Matrix& out = tape.a.back();
    const ActKind last = net.layers.back().act;
    if (kind == LossKind::cross_entropy) {
        if (last != ActKind::softmax_last) {
            throw std::runtime_error("cross_entropy needs probability outputs (softmax last layer required)");
        }
        Matrix delta = out;
        for (int i = 0; i < delta.rows; ++i) {
            delta.at(i, labels[static_cast<size_t>(i)]) -= 1.0;
        }
        return delta;
    }
    if (last == ActKind::softmax_last) {
        throw std::runtime_error("softmax output requires the cross_entropy loss");
    }
    const Matrix targets = mse_targets(labels, out.cols);
    Matrix delta(out.rows, out.cols);
    for (size_t i = 0; i < delta.v.size(); ++i) delta.v[i] = out.v[i] - targets.v[i];
    if (last == ActKind::relu) delta = relu_mask_mul(delta, tape.q.back());
    return delta;
}

}  // namespace

GradientSet backward(const TinyNet& net, const ActivationTape& tape, const std::vector<int>& labels,
                     LossKind kind) {
    const int L = net.num_layers();
    const int b = tape.a.front().rows;
    GradientSet grads;
    grads.dW.resize(static_cast<size_t>(L));
    grads.db.resize(static_cast<size_t>(L));

    Matrix delta = output_delta(net, tape, labels, kind);
    for (int l = L; l >= 1; --l) {
        const TinyLayer& layer = net.layers[static_cast<size_t>(l - 1)];
        Matrix dw = matmul_tn(delta, tape.a[static_cast<size_t>(l - 1)]);
        std::vector<double> db = col_sums(delta);
        for (double& x : dw.v) x /= b;
        for (double& x : db) x /= b;
        grads.dW[static_cast<size_t>(l - 1)] = std::move(dw);
        grads.db[static_cast<size_t>(l - 1)] = std::move(db);
        if (l > 1) {
            Matrix prev = matmul(delta, layer.weights);
            const TinyLayer& below = net.layers[static_cast<size_t>(l - 2)];
            if (below.act == ActKind::relu) {
                prev = relu_mask_mul(prev, tape.q[static_cast<size_t>(l - 2)]);
            }
            delta = std::move(prev);
        }
    }
    return grads;
}

TinyNet sgd_step(const TinyNet& net, const GradientSet& grads, double alpha) {
    TinyNet out = net;
    for (int l = 0; l < net.num_layers(); ++l) {
        const Matrix& dw = grads.dW[static_cast<size_t>(l)];
        const std::vector<double>& db = grads.db[static_cast<size_t>(l)];
        for (double x : dw.v) {
            if (!std::isfinite(x)) throw std::runtime_error("diverged: non-finite gradient");
        }
        for (double x : db) {
            if (!std::isfinite(x)) throw std::runtime_error("diverged: non-finite gradient");
        }
        TinyLayer& layer = out.layers[static_cast<size_t>(l)];
        for (size_t i = 0; i < layer.weights.v.size(); ++i) layer.weights.v[i] -= alpha * dw.v[i];
        for (size_t i = 0; i < layer.bias.size(); ++i) layer.bias[i] -= alpha * db[i];
    }
    return out;
}

TrainResult train_sequential(const TinyNet& net, const Batch& batch, const TrainConfig& cfg) {
    validate_net(net);
    if (batch.size() < 1 || batch.size() != static_cast<int>(batch.labels.size())) {
        throw std::invalid_argument("batch rows and label count disagree");
    }
    TrainResult result;
    result.net = net;
    double alpha = cfg.alpha0;
    for (int t = 1; t <= cfg.iterations; ++t) {
        const ActivationTape tape = forward(result.net, batch.X);
        const double loss = loss_value(tape.a.back(), batch.labels, cfg.loss);
        if (!std::isfinite(loss)) {
            throw std::runtime_error("diverged at iteration " + std::to_string(t));
        }
        result.loss_history.push_back(loss);
        result.acc_history.push_back(accuracy(predict_classes(tape.a.back()), batch.labels));
        const GradientSet grads = backward(result.net, tape, batch.labels, cfg.loss);
        result.net = sgd_step(result.net, grads, alpha);
        alpha *= 1.0 - cfg.decay;
    }
    return result;
}

std::vector<int> predict_classes(const Matrix& output) {
    std::vector<int> cls(static_cast<size_t>(output.rows), 0);
    for (int i = 0; i < output.rows; ++i) {
        if (output.cols == 1) {
            cls[static_cast<size_t>(i)] = output.at(i, 0) >= 0.5 ? 1 : 0;
        } else {
            int best = 0;
            for (int j = 1; j < output.cols; ++j) {
                if (output.at(i, j) > output.at(i, best)) best = j;
            }
            cls[static_cast<size_t>(i)] = best;
        }
    }
    return cls;
}

double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels) {
    if (predictions.empty() || predictions.size() != labels.size()) {
        throw std::invalid_argument("accuracy needs equal, nonempty predictions and labels");
    }
    long tp = 0, tn = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < predictions.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1) {
            throw std::invalid_argument("accuracy expects binary labels");
        }
        if (predictions[i] == 1 && labels[i] == 1) ++tp;
        else if (predictions[i] == 0 && labels[i] == 0) ++tn;
        else if (predictions[i] == 1 && labels[i] == 0) ++fp;
        else ++fn;
    }
    return static_cast<double>(tp + tn) / static_cast<double>(tp + tn + fp + fn);
}

namespace {

// Relu activation sign pattern over all layers; coordinates whose +/- step
// evaluations differ here sit on a kink and get excluded from grad_check.
std::vector<bool> relu_pattern(const TinyNet& net, const ActivationTape& tape) {
    std::vector<bool> mask;
    for (int l = 0; l < net.num_layers(); ++l) {
        if (net.layers[static_cast<size_t>(l)].act != ActKind::relu) continue;
        for (double x : tape.q[static_cast<size_t>(l)].v) mask.push_back(x > 0.0);
    }
    return mask;
}

}  // namespace

GradCheckResult grad_check(const TinyNet& net, const Matrix& X, const std::vector<int>& labels,
                           LossKind kind, double step) {
    if (step <= 0) throw std::invalid_argument("grad_check: step must be positive");
    const ActivationTape tape = forward(net, X);
    const GradientSet analytic = backward(net, tape, labels, kind);

    GradCheckResult result;
    auto probe = [&](int layer, bool is_bias, int index, double analytic_g) {
        TinyNet plus = net;
        TinyNet minus = net;
        auto& pw = plus.layers[static_cast<size_t>(layer)];
        auto& mw = minus.layers[static_cast<size_t>(layer)];
        if (is_bias) {
            pw.bias[static_cast<size_t>(index)] += step;
            mw.bias[static_cast<size_t>(index)] -= step;
        } else {
            pw.weights.v[static_cast<size_t>(index)] += step;
            mw.weights.v[static_cast<size_t>(index)] -= step;
        }
        const ActivationTape tp = forward(plus, X);
        const ActivationTape tm = forward(minus, X);
        if (relu_pattern(plus, tp) != relu_pattern(minus, tm)) {
            ++result.excluded;
            return;
        }
        const double fp = loss_value(tp.a.back(), labels, kind);
        const double fm = loss_value(tm.a.back(), labels, kind);
        const double numeric = (fp - fm) / (2.0 * step);
        const double scale = std::max({1e-6, std::abs(numeric), std::abs(analytic_g)});
        result.max_rel_err = std::max(result.max_rel_err, std::abs(numeric - analytic_g) / scale);
        ++result.checked;
    };

    for (int l = 0; l < net.num_layers(); ++l) {
        const Matrix& dw = analytic.dW[static_cast<size_t>(l)];
        for (size_t i = 0; i < dw.v.size(); ++i) {
            probe(l, false, static_cast<int>(i), dw.v[i]);
        }
        for (size_t i = 0; i < analytic.db[static_cast<size_t>(l)].size(); ++i) {
            probe(l, true, static_cast<int>(i), analytic.db[static_cast<size_t>(l)][i]);
        }
    }
    return result;
}

Batch make_blobs(int samples, int features, double separation, std::uint64_t seed) {
    if (samples < 2 || features < 1) throw std::invalid_argument("make_blobs: degenerate size");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    Batch batch;
    batch.X = Matrix(samples, features);
    batch.labels.resize(static_cast<size_t>(samples));
    for (int i = 0; i < samples; ++i) {
        const int cls = i % 2;
        batch.labels[static_cast<size_t>(i)] = cls;
        const double mean = cls == 0 ? -separation : separation;
        for (int j = 0; j < features; ++j) batch.X.at(i, j) = mean + noise(rng);
    }
    return batch;
}

ModelGraph model_graph_of(const TinyNet& net, const std::string& name) {
    ModelGraph g;
    g.name = name;
    for (int l = 0; l < net.num_layers(); ++l) {
        const TinyLayer& layer = net.layers[static_cast<size_t>(l)];
        LayerSpec spec;
        spec.id = l + 1;
        spec.kind = LayerKind::dense;
        spec.fan_in = layer.fan_in();
        spec.fan_out = layer.fan_out();
        g.layers.push_back(spec);
    }
    return default_costs(g, 8.0);
}

std::string save_matrix(const Matrix& m) {
    std::ostringstream oss;
    oss.precision(17);
    oss << m.rows << " " << m.cols << "\n";
    for (int i = 0; i < m.rows; ++i) {
        for (int j = 0; j < m.cols; ++j) {
            if (j > 0) oss << " ";
            oss << m.at(i, j);
        }
        oss << "\n";
    }
    return oss.str();
}

Matrix load_matrix(const std::string& text) {
    std::istringstream iss(text);
    int rows = 0, cols = 0;
    if (!(iss >> rows >> cols) || rows < 1 || cols < 1) {
        throw std::runtime_error("matrix file must start with \"rows cols\"");
    }
    Matrix m(rows, cols);
    for (double& x : m.v) {
        if (!(iss >> x)) throw std::runtime_error("matrix file truncated");
    }
    return m;
}

std::string save_labels(const std::vector<int>& labels) {
    std::ostringstream oss;
    oss << labels.size() << "\n";
    for (int l : labels) oss << l << "\n";
    return oss.str();
}

std::vector<int> load_labels(const std::string& text) {
    std::istringstream iss(text);
    size_t count = 0;
    if (!(iss >> count)) throw std::runtime_error("label file must start with the count");
    std::vector<int> labels(count);
    for (int& l : labels) {
        if (!(iss >> l)) throw std::runtime_error("label file truncated");
    }
    return labels;
}

}  // namespace pipeplan
