#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pipeplan/model.hpp"

namespace pipeplan {

/// Row-major dense matrix with strict ascending-index accumulation in every
/// product. Reductions never get reordered, so identical call sequences give
/// bitwise identical results — the property the training equivalence
/// contracts are built on.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * static_cast<size_t>(c), 0.0) {}

    double& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }

    bool operator==(const Matrix&) const = default;
};

Matrix matmul(const Matrix& a, const Matrix& b);      // a(r,k) * b(k,c)
Matrix matmul_nt(const Matrix& a, const Matrix& b);   // a(r,k) * b(c,k)^T
Matrix matmul_tn(const Matrix& a, const Matrix& b);   // a(k,r)^T * b(k,c)
Matrix slice_cols(const Matrix& a, int lo, int hi);   // columns [lo, hi)
Matrix slice_rows(const Matrix& a, int lo, int hi);   // rows [lo, hi)
void paste_cols(Matrix& dst, const Matrix& src, int lo);
void paste_rows(Matrix& dst, const Matrix& src, int lo);
std::vector<double> col_sums(const Matrix& a);

enum class ActKind { identity, relu, softmax_last };
enum class LossKind { mse, cross_entropy };

struct TinyLayer {
    Matrix weights;             // fan_out x fan_in
    std::vector<double> bias;   // fan_out
    ActKind act = ActKind::identity;

    int fan_in() const { return weights.cols; }
    int fan_out() const { return weights.rows; }
};

struct TinyNet {
    std::vector<TinyLayer> layers;

    int num_layers() const { return static_cast<int>(layers.size()); }
    int input_dim() const { return layers.front().fan_in(); }
    int output_dim() const { return layers.back().fan_out(); }
};

struct Batch {
    Matrix X;                  // b x input_dim
    std::vector<int> labels;   // one per sample

    int size() const { return X.rows; }
};

struct ActivationTape {
    std::vector<Matrix> a;  // a[0..L]; a[0] is the input
    std::vector<Matrix> q;  // pre-activations q[0..L-1] for layers 1..L
};

struct GradientSet {
    std::vector<Matrix> dW;
    std::vector<std::vector<double>> db;
};

/// Learning-rate schedule alpha_t = alpha0 * (1 - decay)^(t-1).
struct TrainConfig {
    double alpha0 = 1e-4;
    double decay = 1e-2;
    LossKind loss = LossKind::cross_entropy;
    int iterations = 50;
    std::uint64_t seed = 1;
};

/// Shapes chain, entries finite, softmax only on the last layer. Throws.
void validate_net(const TinyNet& net);

/// Seeded uniform [-0.5, 0.5] / sqrt(fan_in) initialization. `dims` lists
/// fan_in of layer 1 followed by each layer's fan_out.
TinyNet init_net(const std::vector<int>& dims, const std::vector<ActKind>& acts,
                 std::uint64_t seed);

ActivationTape forward(const TinyNet& net, const Matrix& X);

/// Batch-mean loss. cross_entropy requires probability rows (softmax last
/// layer); mse uses the 1/2-squared-error convention. mse targets are the
/// label value itself for 1-d outputs and one-hot rows otherwise.
double loss_value(const Matrix& output, const std::vector<int>& labels, LossKind kind);

/// Per-sample loss terms summed in row order, before the batch mean.
double loss_sum(const Matrix& output, const std::vector<int>& labels, LossKind kind);

/// Reverse-pass gradients averaged over the batch, mirroring the tape.
GradientSet backward(const TinyNet& net, const ActivationTape& tape,
                     const std::vector<int>& labels, LossKind kind);

/// One descent step; the input net is untouched. Throws "diverged" on
/// non-finite gradients.
TinyNet sgd_step(const TinyNet& net, const GradientSet& grads, double alpha);

struct TrainResult {
    TinyNet net;
    std::vector<double> loss_history;
    std::vector<double> acc_history;
};

/// The sequential oracle: forward, loss, backward, step, one full batch per
/// iteration. Throws on divergence, naming the iteration.
TrainResult train_sequential(const TinyNet& net, const Batch& batch, const TrainConfig& cfg);

/// Predicted class per row: argmax for multi-dim outputs, threshold 0.5 for
/// 1-d outputs.
std::vector<int> predict_classes(const Matrix& output);

/// (TP + TN) / (TP + TN + FP + FN) over binary labels. Throws on empty input.
double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels);

struct GradCheckResult {
    double max_rel_err = 0.0;
    int checked = 0;
    int excluded = 0;  // coordinates whose perturbation crosses a relu kink
};

/// Central finite differences over every parameter against backward().
/// Coordinates where the +/- step evaluations disagree on any relu
/// activation pattern are excluded rather than failed.
GradCheckResult grad_check(const TinyNet& net, const Matrix& X, const std::vector<int>& labels,
                           LossKind kind, double step);

/// Seeded two-class Gaussian blobs at +/- `separation` per feature.
Batch make_blobs(int samples, int features, double separation, std::uint64_t seed);

/// Abstract cost-model view of the net: dense layers with default costs.
ModelGraph model_graph_of(const TinyNet& net, const std::string& name = "tinynet");

std::string save_matrix(const Matrix& m);
Matrix load_matrix(const std::string& text);
std::string save_labels(const std::vector<int>& labels);
std::vector<int> load_labels(const std::string& text);

}  // namespace pipeplan
