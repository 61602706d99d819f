#pragma once

// Layered and cascaded feedforward networks with a softmax output, batched
// forward/backward passes and per-tensor freezing.

#include <algorithm>
#include <atomic>
#include <compare>
#include <concepts>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "archforge/errors.hpp"
#include "archforge/numerics.hpp"

namespace archforge {

enum class Optimizer { sgd, rmsprop };

inline std::string_view to_string(Optimizer o) {
  switch (o) {
    case Optimizer::sgd: return "sgd";
    case Optimizer::rmsprop: return "rmsprop";
  }
  throw ConfigError("unknown optimizer kind");
}

inline Optimizer parse_optimizer(std::string_view name) {
  if (name == "sgd") return Optimizer::sgd;
  if (name == "rmsprop") return Optimizer::rmsprop;
  throw ConfigError("unknown optimizer '" + std::string(name) + "' (expected sgd or rmsprop)");
}

/// A point of the architecture search space: `depth` hidden layers of `width`
/// units each. Field order is the lexicographic tie-break order used by search.
struct ArchitectureSpec {
  int depth = 1;
  int width = 100;
  Activation hidden_activation = Activation::tanh;
  Optimizer optimizer = Optimizer::rmsprop;

  auto operator<=>(const ArchitectureSpec&) const = default;
};

inline std::string to_string(const ArchitectureSpec& s) {
  return std::to_string(s.depth) + "x" + std::to_string(s.width) + " " + std::string(to_string(s.hidden_activation)) +
         " " + std::string(to_string(s.optimizer));
}

/// One fully connected tensor pair. `weights` is fan_out x fan_in.
struct DenseLayer {
  Matrix weights;
  Vector bias;
  Activation activation = Activation::tanh;  // ignored on softmax heads
  bool frozen = false;

  DenseLayer() = default;
  DenseLayer(Eigen::Index fan_in, Eigen::Index fan_out, Activation act)
      : weights(Matrix::Zero(fan_out, fan_in)), bias(Vector::Zero(fan_out)), activation(act) {}

  Eigen::Index fan_in() const { return weights.cols(); }
  Eigen::Index fan_out() const { return weights.rows(); }
  std::size_t parameter_count() const { return static_cast<std::size_t>((fan_in() + 1) * fan_out()); }

  bool operator==(const DenseLayer& o) const {
    return weights.rows() == o.weights.rows() && weights.cols() == o.weights.cols() && weights == o.weights &&
           bias == o.bias && activation == o.activation && frozen == o.frozen;
  }
};

inline double glorot_limit(Eigen::Index fan_in, Eigen::Index fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

// Glorot-uniform weights, zero bias.
inline void init_glorot(DenseLayer& layer, Rng& rng) {
  const double a = glorot_limit(layer.fan_in(), layer.fan_out());
  for (Eigen::Index r = 0; r < layer.weights.rows(); ++r)
    for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) layer.weights(r, c) = rng.uniform(-a, a);
  layer.bias.setZero();
}

struct LayerGrad {
  Matrix weights;
  Vector bias;
};

/// Gradients in the same order as the owning network's parameter_layers().
struct GradientSet {
  std::vector<LayerGrad> layers;

  GradientSet& operator*=(double s) {
    for (auto& g : layers) {
      g.weights *= s;
      g.bias *= s;
    }
    return *this;
  }
};

/// Activations retained by forward() for the matching backward() call.
struct ForwardCache {
  Matrix probabilities;              // B x C
  std::vector<Matrix> activations;   // layered: input then each hidden output; cascade: one [input | blocks] matrix
  const void* owner = nullptr;
  std::uint64_t revision = 0;
};

namespace detail {

inline std::uint64_t next_revision() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

// logits = A W^T + b
template <typename In>
Matrix affine_batch(const Eigen::MatrixBase<In>& input, const DenseLayer& layer) {
  Matrix z(input.rows(), layer.fan_out());
  z.noalias() = input * layer.weights.transpose();
  z.rowwise() += layer.bias.transpose();
  return z;
}

inline LayerGrad zero_grad(const DenseLayer& layer) {
  return {Matrix::Zero(layer.weights.rows(), layer.weights.cols()), Vector::Zero(layer.bias.size())};
}

template <typename In>
void accumulate_grad(LayerGrad& g, const Matrix& dz, const Eigen::MatrixBase<In>& input) {
  g.weights.noalias() = dz.transpose() * input;
  g.bias = dz.colwise().sum().transpose();
}

// Softmax Jacobian applied row-wise: dZ = P .* (dP - rowsum(dP .* P)).
inline Matrix softmax_backward(const Matrix& probabilities, const Matrix& d_probabilities) {
  Matrix dz = d_probabilities;
  for (Eigen::Index r = 0; r < dz.rows(); ++r) {
    const double dot = dz.row(r).dot(probabilities.row(r));
    dz.row(r) = (probabilities.row(r).array() * (dz.row(r).array() - dot)).matrix();
  }
  return dz;
}

}  // namespace detail

// ---------------------------------------------------------------------------

/// Stack of hidden layers followed by a softmax head.
class LayeredNetwork {
 public:
  LayeredNetwork() = default;

  LayeredNetwork(Eigen::Index input_dim, const std::vector<std::pair<int, Activation>>& hidden, Eigen::Index output_dim)
      : input_dim_(input_dim), revision_(detail::next_revision()) {
    require(input_dim >= 1 && output_dim >= 1, "build_layered: input and output dimensions must be >= 1");
    Eigen::Index fan_in = input_dim;
    for (const auto& [width, act] : hidden) {
      require(width >= 1, "build_layered: hidden width must be >= 1");
      hidden_.emplace_back(fan_in, width, act);
      fan_in = width;
    }
    head_ = DenseLayer(fan_in, output_dim, Activation::tanh);
  }

  Eigen::Index input_dim() const { return input_dim_; }
  Eigen::Index output_dim() const { return head_.fan_out(); }
  std::size_t depth() const { return hidden_.size(); }

  const std::vector<DenseLayer>& hidden() const { return hidden_; }
  DenseLayer& hidden_layer(std::size_t i) { return hidden_.at(i); }
  const DenseLayer& hidden_layer(std::size_t i) const { return hidden_.at(i); }
  DenseLayer& head() { return head_; }
  const DenseLayer& head() const { return head_; }

  std::vector<int> widths() const {
    std::vector<int> w;
    for (const auto& l : hidden_) w.push_back(static_cast<int>(l.fan_out()));
    return w;
  }

  std::vector<DenseLayer*> parameter_layers() {
    std::vector<DenseLayer*> out;
    for (auto& l : hidden_) out.push_back(&l);
    out.push_back(&head_);
    return out;
  }
  std::vector<const DenseLayer*> parameter_layers() const {
    std::vector<const DenseLayer*> out;
    for (const auto& l : hidden_) out.push_back(&l);
    out.push_back(&head_);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = head_.parameter_count();
    for (const auto& l : hidden_) n += l.parameter_count();
    return n;
  }

  void freeze_all(bool frozen = true) {
    for (auto* l : parameter_layers()) l->frozen = frozen;
  }

  // Appends a hidden layer below the head; the head is rebuilt with the new fan-in.
  void push_hidden(DenseLayer layer) {
    require(layer.fan_in() == (hidden_.empty() ? input_dim_ : hidden_.back().fan_out()),
            "push_hidden: fan-in does not match the current top layer");
    hidden_.push_back(std::move(layer));
    head_ = DenseLayer(hidden_.back().fan_out(), head_.fan_out(), Activation::tanh);
    revision_ = detail::next_revision();
  }

  void set_head(DenseLayer head) {
    require(head.fan_in() == top_width() && head.fan_out() == output_dim(), "set_head: shape mismatch");
    head_ = std::move(head);
  }

  // Keeps the first `depth` hidden layers; the head must be replaced afterwards.
  void truncate(std::size_t depth) {
    require(depth <= hidden_.size(), "truncate: depth exceeds network depth");
    hidden_.resize(depth);
    head_ = DenseLayer(top_width(), head_.fan_out(), Activation::tanh);
    revision_ = detail::next_revision();
  }

  Eigen::Index top_width() const { return hidden_.empty() ? input_dim_ : hidden_.back().fan_out(); }

  ForwardCache forward(const Matrix& batch) const {
    require(batch.cols() == input_dim_, "forward: batch has " + std::to_string(batch.cols()) +
                                            " columns, network expects " + std::to_string(input_dim_));
    ForwardCache cache;
    cache.owner = this;
    cache.revision = revision_;
    cache.activations.reserve(hidden_.size() + 1);
    cache.activations.push_back(batch);
    for (const auto& layer : hidden_) {
      Matrix z = detail::affine_batch(cache.activations.back(), layer);
      cache.activations.push_back(activation(layer.activation, z));
    }
    cache.probabilities = detail::affine_batch(cache.activations.back(), head_);
    softmax_rows_inplace(cache.probabilities);
    return cache;
  }

  // Forward pass without retaining intermediate activations.
  Matrix predict(const Matrix& batch) const {
    require(batch.cols() == input_dim_, "predict: dimension mismatch");
    Matrix a = batch;
    for (const auto& layer : hidden_) a = activation(layer.activation, detail::affine_batch(a, layer));
    Matrix p = detail::affine_batch(a, head_);
    softmax_rows_inplace(p);
    return p;
  }

  // Output of the top hidden layer (the input itself when there are none).
  Matrix hidden_features(const Matrix& batch) const {
    require(batch.cols() == input_dim_, "hidden_features: dimension mismatch");
    Matrix a = batch;
    for (const auto& layer : hidden_) a = activation(layer.activation, detail::affine_batch(a, layer));
    return a;
  }

  /// Gradients given dLoss/dLogits (pre-softmax), already averaged over the batch.
  GradientSet backward_logits(const ForwardCache& cache, const Matrix& d_logits) const {
    check_cache(cache, d_logits);
    GradientSet grads;
    for (const auto* l : parameter_layers()) grads.layers.push_back(detail::zero_grad(*l));

    // Lowest layer that still needs a gradient; nothing below it is visited.
    std::size_t lowest = hidden_.size();
    for (std::size_t i = 0; i < hidden_.size(); ++i)
      if (!hidden_[i].frozen) {
        lowest = i;
        break;
      }

    if (!head_.frozen) detail::accumulate_grad(grads.layers.back(), d_logits, cache.activations.back());
    Matrix dz = d_logits;
    const DenseLayer* above = &head_;
    for (std::size_t i = hidden_.size(); i-- > lowest;) {
      Matrix da = dz * above->weights;
      dz = (da.array() * activation_grad_from_output(hidden_[i].activation, cache.activations[i + 1]).array()).matrix();
      if (!hidden_[i].frozen) detail::accumulate_grad(grads.layers[i], dz, cache.activations[i]);
      above = &hidden_[i];
    }
    return grads;
  }

  /// Gradients given dLoss/dProbabilities.
  GradientSet backward(const ForwardCache& cache, const Matrix& d_probabilities) const {
    check_cache(cache, d_probabilities);
    return backward_logits(cache, detail::softmax_backward(cache.probabilities, d_probabilities));
  }

  bool operator==(const LayeredNetwork& o) const {
    return input_dim_ == o.input_dim_ && hidden_ == o.hidden_ && head_ == o.head_;
  }

 private:
  void check_cache(const ForwardCache& cache, const Matrix& d) const {
    require(cache.owner == this && cache.revision == revision_, "backward: cache does not belong to this network state");
    require(d.rows() == cache.probabilities.rows() && d.cols() == cache.probabilities.cols(),
            "backward: gradient shape does not match forward output");
  }

  Eigen::Index input_dim_ = 0;
  std::vector<DenseLayer> hidden_;
  DenseLayer head_;
  std::uint64_t revision_ = 0;
};

inline LayeredNetwork build_layered(Eigen::Index input_dim, const std::vector<std::pair<int, Activation>>& hidden,
                                    Eigen::Index output_dim) {
  return LayeredNetwork(input_dim, hidden, output_dim);
}

inline LayeredNetwork build_layered(Eigen::Index input_dim, const ArchitectureSpec& spec, Eigen::Index output_dim) {
  require(spec.depth >= 1 && spec.width >= 1, "build_layered: spec depth and width must be >= 1");
  return LayeredNetwork(input_dim, std::vector<std::pair<int, Activation>>(spec.depth, {spec.width, spec.hidden_activation}),
                        output_dim);
}

// ---------------------------------------------------------------------------

enum class OutputInit { fresh, reuse_previous };

/// Cascade topology: block k reads the input and the outputs of blocks 1..k-1;
/// the softmax output layer reads the input and every block.
class CascadeNetwork {
 public:
  CascadeNetwork() = default;
  CascadeNetwork(Eigen::Index input_dim, Eigen::Index output_dim)
      : input_dim_(input_dim), output_(input_dim, output_dim, Activation::tanh), revision_(detail::next_revision()) {
    require(input_dim >= 1 && output_dim >= 1, "CascadeNetwork: dimensions must be >= 1");
  }

  Eigen::Index input_dim() const { return input_dim_; }
  Eigen::Index output_dim() const { return output_.fan_out(); }
  std::size_t block_count() const { return blocks_.size(); }
  const std::vector<DenseLayer>& blocks() const { return blocks_; }
  DenseLayer& block(std::size_t i) { return blocks_.at(i); }
  const DenseLayer& block(std::size_t i) const { return blocks_.at(i); }
  DenseLayer& output() { return output_; }
  const DenseLayer& output() const { return output_; }

  // Width of [input | all blocks].
  Eigen::Index feature_dim() const {
    Eigen::Index n = input_dim_;
    for (const auto& b : blocks_) n += b.fan_out();
    return n;
  }

  std::vector<int> widths() const {
    std::vector<int> w;
    for (const auto& b : blocks_) w.push_back(static_cast<int>(b.fan_out()));
    return w;
  }

  std::vector<DenseLayer*> parameter_layers() {
    std::vector<DenseLayer*> out;
    for (auto& b : blocks_) out.push_back(&b);
    out.push_back(&output_);
    return out;
  }
  std::vector<const DenseLayer*> parameter_layers() const {
    std::vector<const DenseLayer*> out;
    for (const auto& b : blocks_) out.push_back(&b);
    out.push_back(&output_);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = output_.parameter_count();
    for (const auto& b : blocks_) n += b.parameter_count();
    return n;
  }

  void freeze_all(bool frozen = true) {
    for (auto* l : parameter_layers()) l->frozen = frozen;
  }

  /// Appends a block whose weights are already set, and attaches `output`
  /// (fan-in grown by the block width) as the new output layer.
  void insert_block(DenseLayer block, DenseLayer output) {
    require(block.fan_in() == feature_dim(), "insert_block: block fan-in must equal input_dim + sum of block widths");
    require(output.fan_in() == feature_dim() + block.fan_out() && output.fan_out() == output_dim(),
            "insert_block: output layer shape mismatch");
    blocks_.push_back(std::move(block));
    output_ = std::move(output);
    revision_ = detail::next_revision();
  }

  void set_output(DenseLayer output) {
    require(output.fan_in() == feature_dim() && output.fan_out() == output_dim(), "set_output: shape mismatch");
    output_ = std::move(output);
  }

  // [input | block outputs] for a batch.
  Matrix features(const Matrix& batch) const {
    require(batch.cols() == input_dim_, "forward: batch has " + std::to_string(batch.cols()) +
                                            " columns, network expects " + std::to_string(input_dim_));
    Matrix a(batch.rows(), feature_dim());
    a.leftCols(input_dim_) = batch;
    Eigen::Index offset = input_dim_;
    for (const auto& b : blocks_) {
      Matrix z = detail::affine_batch(a.leftCols(offset), b);
      a.middleCols(offset, b.fan_out()) = activation(b.activation, z);
      offset += b.fan_out();
    }
    return a;
  }

  ForwardCache forward(const Matrix& batch) const {
    ForwardCache cache;
    cache.owner = this;
    cache.revision = revision_;
    cache.activations.push_back(features(batch));
    cache.probabilities = detail::affine_batch(cache.activations.front(), output_);
    softmax_rows_inplace(cache.probabilities);
    return cache;
  }

  Matrix predict(const Matrix& batch) const { return forward(batch).probabilities; }

  GradientSet backward_logits(const ForwardCache& cache, const Matrix& d_logits) const {
    check_cache(cache, d_logits);
    const Matrix& a = cache.activations.front();
    GradientSet grads;
    for (const auto* l : parameter_layers()) grads.layers.push_back(detail::zero_grad(*l));
    if (!output_.frozen) detail::accumulate_grad(grads.layers.back(), d_logits, a);

    std::size_t lowest = blocks_.size();
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      if (!blocks_[i].frozen) {
        lowest = i;
        break;
      }
    if (lowest == blocks_.size()) return grads;

    // Gradient w.r.t. the hidden columns of [input | blocks]; input columns are never needed.
    const Eigen::Index hidden_cols = a.cols() - input_dim_;
    Matrix da(a.rows(), hidden_cols);
    da.noalias() = d_logits * output_.weights.rightCols(hidden_cols);

    std::vector<Eigen::Index> offsets(blocks_.size());
    Eigen::Index offset = input_dim_;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      offsets[i] = offset;
      offset += blocks_[i].fan_out();
    }
    for (std::size_t i = blocks_.size(); i-- > lowest;) {
      const DenseLayer& b = blocks_[i];
      const Eigen::Index off = offsets[i];
      Matrix dz = (da.middleCols(off - input_dim_, b.fan_out()).array() *
                   activation_grad_from_output(b.activation, a.middleCols(off, b.fan_out())).array())
                      .matrix();
      if (!b.frozen) detail::accumulate_grad(grads.layers[i], dz, a.leftCols(off));
      if (i > lowest && off > input_dim_)
        da.leftCols(off - input_dim_).noalias() += dz * b.weights.rightCols(off - input_dim_);
    }
    return grads;
  }

  GradientSet backward(const ForwardCache& cache, const Matrix& d_probabilities) const {
    check_cache(cache, d_probabilities);
    return backward_logits(cache, detail::softmax_backward(cache.probabilities, d_probabilities));
  }

  bool operator==(const CascadeNetwork& o) const {
    return input_dim_ == o.input_dim_ && blocks_ == o.blocks_ && output_ == o.output_;
  }

 private:
  void check_cache(const ForwardCache& cache, const Matrix& d) const {
    require(cache.owner == this && cache.revision == revision_, "backward: cache does not belong to this network state");
    require(d.rows() == cache.probabilities.rows() && d.cols() == cache.probabilities.cols(),
            "backward: gradient shape does not match forward output");
  }

  Eigen::Index input_dim_ = 0;
  std::vector<DenseLayer> blocks_;
  DenseLayer output_;
  std::uint64_t revision_ = 0;
};

/// Output layer for a cascade that grew by `added` feature columns. Under
/// reuse_previous the existing columns and bias are copied and only the new
/// columns are drawn; under fresh the whole layer is re-drawn.
inline DenseLayer grown_output_layer(const DenseLayer& previous, Eigen::Index added, OutputInit init, Rng& rng) {
  DenseLayer out(previous.fan_in() + added, previous.fan_out(), Activation::tanh);
  if (init == OutputInit::fresh) {
    init_glorot(out, rng);
    return out;
  }
  const double a = glorot_limit(out.fan_in(), out.fan_out());
  out.weights.leftCols(previous.fan_in()) = previous.weights;
  for (Eigen::Index r = 0; r < out.weights.rows(); ++r)
    for (Eigen::Index c = previous.fan_in(); c < out.fan_in(); ++c) out.weights(r, c) = rng.uniform(-a, a);
  out.bias = previous.bias;
  return out;
}

/// Appends a freshly initialized block of `width` units.
inline CascadeNetwork& add_cascade_block(CascadeNetwork& net, int width, Activation act, Rng& rng, OutputInit init) {
  require(width >= 1, "add_cascade_block: width must be >= 1");
  DenseLayer block(net.feature_dim(), width, act);
  init_glorot(block, rng);
  DenseLayer out = grown_output_layer(net.output(), width, init, rng);
  net.insert_block(std::move(block), std::move(out));
  return net;
}

// ---------------------------------------------------------------------------
// Helpers shared by both topologies.

template <typename Net>
concept FeedforwardNetwork = requires(Net n, const Net cn, const Matrix& m, const ForwardCache& c) {
  { cn.forward(m) } -> std::same_as<ForwardCache>;
  { cn.predict(m) } -> std::same_as<Matrix>;
  { cn.backward_logits(c, m) } -> std::same_as<GradientSet>;
  { n.parameter_layers() } -> std::same_as<std::vector<DenseLayer*>>;
  { cn.parameter_count() } -> std::convertible_to<std::size_t>;
};

template <FeedforwardNetwork Net>
Net& init_weights(Net& net, Rng& rng) {
  for (auto* layer : net.parameter_layers()) init_glorot(*layer, rng);
  return net;
}

// All parameters concatenated, layer by layer: weights row-major, then bias.
template <FeedforwardNetwork Net>
Vector flatten_parameters(const Net& net) {
  Vector out(static_cast<Eigen::Index>(net.parameter_count()));
  Eigen::Index k = 0;
  for (const auto* l : net.parameter_layers()) {
    out.segment(k, l->weights.size()) = l->weights.template reshaped<Eigen::RowMajor>();
    k += l->weights.size();
    out.segment(k, l->bias.size()) = l->bias;
    k += l->bias.size();
  }
  return out;
}

template <FeedforwardNetwork Net>
void assign_parameters(Net& net, const Vector& flat) {
  require(flat.size() == static_cast<Eigen::Index>(net.parameter_count()), "assign_parameters: length mismatch");
  Eigen::Index k = 0;
  for (auto* l : net.parameter_layers()) {
    l->weights.template reshaped<Eigen::RowMajor>() = flat.segment(k, l->weights.size());
    k += l->weights.size();
    l->bias = flat.segment(k, l->bias.size());
    k += l->bias.size();
  }
}

inline Vector flatten_gradients(const GradientSet& g) {
  Eigen::Index n = 0;
  for (const auto& l : g.layers) n += l.weights.size() + l.bias.size();
  Vector out(n);
  Eigen::Index k = 0;
  for (const auto& l : g.layers) {
    out.segment(k, l.weights.size()) = l.weights.reshaped<Eigen::RowMajor>();
    k += l.weights.size();
    out.segment(k, l.bias.size()) = l.bias;
    k += l.bias.size();
  }
  return out;
}

}  // namespace archforge
