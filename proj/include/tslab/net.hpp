#pragma once

// Fully-connected ReLU networks with optional BatchNorm: forward evaluation
// with a full trace, manual backpropagation of the squared teacher-student
// loss, and plain SGD.
//
// Conventions used throughout the library:
//  * a batch is a (batch x width) matrix, one sample per row;
//  * the weights of layer l form a (width_{l} x width_{l+1}) matrix whose
//    column j is the incoming filter w_j of node j;
//  * gradients are *negative* gradients (descent directions), per sample and
//    unscaled: the top-layer node gradient is teacher_out - student_out.

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tslab/error.hpp"
#include "tslab/linalg.hpp"

namespace tslab {

enum class BnMode { none, linear_relu_bn, linear_bn_relu };

inline std::string to_string(BnMode mode) {
  switch (mode) {
    case BnMode::none: return "none";
    case BnMode::linear_relu_bn: return "linear_relu_bn";
    case BnMode::linear_bn_relu: return "linear_bn_relu";
  }
  return "none";
}

inline BnMode parse_bn_mode(const std::string& s) {
  if (s == "none") return BnMode::none;
  if (s == "linear_relu_bn") return BnMode::linear_relu_bn;
  if (s == "linear_bn_relu") return BnMode::linear_bn_relu;
  throw ConfigError("unknown bn_mode '" + s + "'");
}

struct NetworkSpec {
  std::vector<Index> widths;  // input first, output last
  BnMode bn_mode = BnMode::none;
  std::vector<bool> has_bias;  // one entry per weight layer

  /// Spec with biases everywhere except where BatchNorm absorbs them.
  static NetworkSpec make(std::vector<Index> widths, BnMode mode = BnMode::none,
                          bool bias = true) {
    NetworkSpec s;
    s.widths = std::move(widths);
    s.bn_mode = mode;
    const std::size_t layers = s.widths.empty() ? 0 : s.widths.size() - 1;
    s.has_bias.assign(layers, bias);
    for (std::size_t l = 0; l + 1 < layers; ++l)
      if (mode != BnMode::none) s.has_bias[l] = false;
    return s;
  }

  Index num_layers() const { return static_cast<Index>(widths.size()) - 1; }
  Index input_dim() const { return widths.front(); }
  Index output_dim() const { return widths.back(); }
  bool is_top(Index layer) const { return layer == num_layers() - 1; }
  /// The top layer never has a ReLU or a BatchNorm.
  bool has_bn(Index layer) const { return bn_mode != BnMode::none && !is_top(layer); }

  void validate() const {
    if (widths.size() < 2) throw ConfigError("network needs at least 2 widths");
    for (Index w : widths)
      if (w < 1) throw ConfigError("network widths must be >= 1");
    if (has_bias.size() != widths.size() - 1)
      throw ConfigError("has_bias must have one entry per weight layer");
  }
};

struct Layer {
  Matrix w;   // fan_in x fan_out
  Vector b;   // empty when the layer has no bias
  Vector c0;  // BatchNorm scale, empty without BN
  Vector c1;  // BatchNorm bias, empty without BN
};

struct Network {
  NetworkSpec spec;
  std::vector<Layer> layers;

  Index num_layers() const { return spec.num_layers(); }

  void validate() const {
    spec.validate();
    if (static_cast<Index>(layers.size()) != spec.num_layers())
      throw ConfigError("layer count does not match spec");
    for (Index l = 0; l < num_layers(); ++l) {
      const Layer& L = layers[l];
      const Index in = spec.widths[l], out = spec.widths[l + 1];
      if (L.w.rows() != in || L.w.cols() != out)
        throw ConfigError("layer " + std::to_string(l) + " weight shape mismatch");
      if (L.b.size() != (spec.has_bias[l] ? out : 0))
        throw ConfigError("layer " + std::to_string(l) + " bias shape mismatch");
      const Index bn = spec.has_bn(l) ? out : 0;
      if (L.c0.size() != bn || L.c1.size() != bn)
        throw ConfigError("layer " + std::to_string(l) + " BatchNorm shape mismatch");
      if (!L.w.allFinite() || !L.b.allFinite() || !L.c0.allFinite() || !L.c1.allFinite())
        throw NumericError("layer " + std::to_string(l) + " has non-finite parameters");
    }
  }
};

/// Statistics of one BatchNorm site over a batch.
struct BnSite {
  Matrix input;     // f: pre-BN activations
  Vector mean;      // mu per channel
  Vector stddev;    // sigma per channel (population std, no epsilon)
  Matrix whitened;  // (f - mu) / sigma
  Vector c0;        // scale used for this pass
};

struct LayerTrace {
  Matrix lin;       // x W (+ b)
  Matrix pre_act;   // ReLU input
  Matrix gate;      // f' in {0, 1}; all ones on the top layer
  Matrix relu_out;  // gate .* pre_act
  Matrix act;       // layer output fed to the next layer
  std::optional<BnSite> bn;
};

struct ForwardTrace {
  Matrix input;
  std::vector<LayerTrace> layers;

  Index batch_size() const { return input.rows(); }
  const Matrix& output() const { return layers.back().act; }
  /// Output of layer l, or the input batch for l == -1.
  const Matrix& activation(Index l) const { return l < 0 ? input : layers[l].act; }
};

struct LayerGrad {
  Matrix node;  // negative gradient w.r.t. the linear output, per sample
  Matrix w;     // batch mean of node_j * f_k
  Vector b;
  Vector c0;
  Vector c1;
};

struct GradientSet {
  std::vector<LayerGrad> layers;
};

inline constexpr double kMinBatchStd = 1e-12;

/// BatchNorm forward over batch statistics. Returns the site statistics; the
/// normalized output is c0 * whitened + c1.
inline BnSite bn_forward(const Matrix& f, const Vector& c0) {
  if (f.rows() < 2) throw PreconditionError("BatchNorm needs a batch of at least 2 samples");
  BnSite s;
  s.input = f;
  s.c0 = c0;
  s.mean = f.colwise().mean().transpose();
  Matrix centered = f.rowwise() - s.mean.transpose();
  s.stddev = (centered.array().square().colwise().sum() / static_cast<double>(f.rows()))
                 .sqrt()
                 .transpose();
  for (Index c = 0; c < f.cols(); ++c)
    if (s.stddev(c) < kMinBatchStd)
      throw DegenerateBatchError("BatchNorm channel " + std::to_string(c) +
                                 " has zero batch standard deviation");
  s.whitened = centered.array().rowwise() / s.stddev.transpose().array();
  return s;
}

inline Matrix bn_output(const BnSite& s, const Vector& c1) {
  return (s.whitened.array().rowwise() * s.c0.transpose().array()).rowwise() +
         c1.transpose().array();
}

inline ForwardTrace forward(const Network& net, const Matrix& batch) {
  const NetworkSpec& spec = net.spec;
  if (batch.cols() != spec.input_dim())
    throw ConfigError("batch has " + std::to_string(batch.cols()) + " columns, network expects " +
                      std::to_string(spec.input_dim()));
  if (spec.bn_mode != BnMode::none && batch.rows() < 2)
    throw PreconditionError("BatchNorm needs a batch of at least 2 samples");

  ForwardTrace tr;
  tr.input = batch;
  tr.layers.resize(net.num_layers());
  const Matrix* x = &tr.input;
  for (Index l = 0; l < net.num_layers(); ++l) {
    const Layer& layer = net.layers[l];
    LayerTrace& t = tr.layers[l];
    t.lin = (*x) * layer.w;
    if (layer.b.size() > 0) t.lin.rowwise() += layer.b.transpose();

    if (spec.is_top(l)) {
      t.pre_act = t.lin;
      t.gate = Matrix::Ones(t.lin.rows(), t.lin.cols());
      t.relu_out = t.lin;
      t.act = t.lin;
    } else if (spec.bn_mode == BnMode::linear_bn_relu) {
      t.bn = bn_forward(t.lin, layer.c0);
      t.pre_act = bn_output(*t.bn, layer.c1);
      t.gate = (t.pre_act.array() > 0.0).cast<double>();
      t.relu_out = t.gate.cwiseProduct(t.pre_act);
      t.act = t.relu_out;
    } else {
      t.pre_act = t.lin;
      t.gate = (t.pre_act.array() > 0.0).cast<double>();
      t.relu_out = t.gate.cwiseProduct(t.pre_act);
      if (spec.bn_mode == BnMode::linear_relu_bn) {
        t.bn = bn_forward(t.relu_out, layer.c0);
        t.act = bn_output(*t.bn, layer.c1);
      } else {
        t.act = t.relu_out;
      }
    }
    x = &t.act;
  }
  return tr;
}

/// Half the batch mean of the squared output error.
inline double loss(const Matrix& student_out, const Matrix& teacher_out) {
  return 0.5 * (student_out - teacher_out).squaredNorm() / static_cast<double>(student_out.rows());
}

struct BnGrad {
  Matrix g_in;
  Vector g_c0;  // batch sum of g_out .* whitened
  Vector g_c1;  // batch sum of g_out
};

/// BatchNorm backward pass. The input gradient is (c0 / sigma) times the
/// projection of g_out onto the orthogonal complement of span{f, 1}, so it is
/// zero-mean and uncorrelated with the pre-BN activation f.
inline BnGrad bn_backward(const Matrix& g_out, const BnSite& site) {
  if (g_out.rows() != site.input.rows() || g_out.cols() != site.input.cols())
    throw PreconditionError("bn_backward: gradient shape does not match BatchNorm site");
  for (Index c = 0; c < site.stddev.size(); ++c)
    if (site.stddev(c) < kMinBatchStd)
      throw DegenerateBatchError("bn_backward: channel " + std::to_string(c) + " has zero std");

  const double n = static_cast<double>(g_out.rows());
  BnGrad out;
  out.g_c1 = g_out.colwise().sum().transpose();
  out.g_c0 = g_out.cwiseProduct(site.whitened).colwise().sum().transpose();

  // whitened columns have mean 0 and squared norm n, so this is the
  // orthogonal projection against {1, f}.
  Matrix proj = g_out;
  proj.rowwise() -= (out.g_c1 / n).transpose();
  proj.array() -= site.whitened.array().rowwise() * (out.g_c0 / n).transpose().array();
  out.g_in = proj.array().rowwise() * (site.c0.array() / site.stddev.array()).transpose();
  return out;
}

inline GradientSet backward(const Network& net, const ForwardTrace& trace,
                            const Matrix& teacher_out) {
  if (static_cast<Index>(trace.layers.size()) != net.num_layers())
    throw PreconditionError("backward: trace depth does not match network");
  const Index n = trace.batch_size();
  if (teacher_out.rows() != n || teacher_out.cols() != net.spec.output_dim())
    throw PreconditionError("backward: teacher output shape does not match trace");

  const double inv_n = 1.0 / static_cast<double>(n);
  GradientSet gs;
  gs.layers.resize(net.num_layers());

  // Negative gradient w.r.t. the output of the current layer.
  Matrix up = teacher_out - trace.output();
  for (Index l = net.num_layers() - 1; l >= 0; --l) {
    const LayerTrace& t = trace.layers[l];
    const Layer& layer = net.layers[l];
    LayerGrad& g = gs.layers[l];

    if (net.spec.is_top(l)) {
      g.node = up;
    } else if (net.spec.bn_mode == BnMode::linear_bn_relu) {
      BnGrad bg = bn_backward(t.gate.cwiseProduct(up), *t.bn);
      g.node = std::move(bg.g_in);
      g.c0 = bg.g_c0 * inv_n;
      g.c1 = bg.g_c1 * inv_n;
    } else if (net.spec.bn_mode == BnMode::linear_relu_bn) {
      BnGrad bg = bn_backward(up, *t.bn);
      g.node = t.gate.cwiseProduct(bg.g_in);
      g.c0 = bg.g_c0 * inv_n;
      g.c1 = bg.g_c1 * inv_n;
    } else {
      g.node = t.gate.cwiseProduct(up);
    }

    const Matrix& below = trace.activation(l - 1);
    g.w = below.transpose() * g.node * inv_n;
    if (layer.b.size() > 0) g.b = g.node.colwise().mean().transpose();
    if (l > 0) up = g.node * layer.w.transpose();
  }
  return gs;
}

/// One plain SGD step along the stored negative gradients.
inline Network sgd_step(const Network& net, const GradientSet& grads, double eta) {
  if (static_cast<Index>(grads.layers.size()) != net.num_layers())
    throw ConfigError("sgd_step: gradient depth does not match network");
  Network out = net;
  for (Index l = 0; l < net.num_layers(); ++l) {
    const LayerGrad& g = grads.layers[l];
    Layer& p = out.layers[l];
    if (g.w.rows() != p.w.rows() || g.w.cols() != p.w.cols() || g.b.size() != p.b.size() ||
        g.c0.size() != p.c0.size() || g.c1.size() != p.c1.size())
      throw ConfigError("sgd_step: gradient shape mismatch at layer " + std::to_string(l));
    if (!g.w.allFinite() || !g.b.allFinite() || !g.c0.allFinite() || !g.c1.allFinite())
      throw NumericError("sgd_step: non-finite gradient at layer " + std::to_string(l));
    p.w += eta * g.w;
    if (p.b.size() > 0) p.b += eta * g.b;
    if (p.c0.size() > 0) {
      p.c0 += eta * g.c0;
      p.c1 += eta * g.c1;
    }
  }
  return out;
}

/// Euclidean norm of every weight column (bias excluded), per layer.
inline std::vector<Vector> filter_norms(const Network& net) {
  std::vector<Vector> out;
  out.reserve(net.layers.size());
  for (const Layer& l : net.layers) out.push_back(l.w.colwise().norm().transpose());
  return out;
}

/// Gaussian weights with std 1/sqrt(fan_in), zero biases, BN scale 1 and bias 0.
inline Network init_network(const NetworkSpec& spec, Rng& rng, bool normalize_columns = false) {
  spec.validate();
  Network net;
  net.spec = spec;
  for (Index l = 0; l < spec.num_layers(); ++l) {
    const Index in = spec.widths[l], out = spec.widths[l + 1];
    Layer layer;
    layer.w = rng.gaussian(in, out, 1.0 / std::sqrt(static_cast<double>(in)));
    if (normalize_columns) layer.w = column_normalize(layer.w);
    if (spec.has_bias[l]) layer.b = Vector::Zero(out);
    if (spec.has_bn(l)) {
      layer.c0 = Vector::Ones(out);
      layer.c1 = Vector::Zero(out);
    }
    net.layers.push_back(std::move(layer));
  }
  return net;
}

// ---------------------------------------------------------------------------
// JSON: {"widths": [...], "bn_mode": "...",
//        "layers": [{"w": row-major array, "b": [...], "c0": [...], "c1": [...]}]}

namespace detail {
inline nlohmann::json vector_json(const Vector& v) {
  return nlohmann::json(std::vector<double>(v.data(), v.data() + v.size()));
}
inline Vector json_vector(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
}
}  // namespace detail

inline nlohmann::json to_json(const Network& net) {
  nlohmann::json j;
  j["widths"] = net.spec.widths;
  j["bn_mode"] = to_string(net.spec.bn_mode);
  j["layers"] = nlohmann::json::array();
  for (const Layer& l : net.layers) {
    std::vector<double> w;
    w.reserve(static_cast<std::size_t>(l.w.size()));
    for (Index r = 0; r < l.w.rows(); ++r)
      for (Index c = 0; c < l.w.cols(); ++c) w.push_back(l.w(r, c));
    j["layers"].push_back({{"w", w},
                           {"b", detail::vector_json(l.b)},
                           {"c0", detail::vector_json(l.c0)},
                           {"c1", detail::vector_json(l.c1)}});
  }
  return j;
}

inline Network network_from_json(const nlohmann::json& j) {
  try {
    Network net;
    net.spec.widths = j.at("widths").get<std::vector<Index>>();
    net.spec.bn_mode = parse_bn_mode(j.at("bn_mode").get<std::string>());
    const auto& layers = j.at("layers");
    if (net.spec.widths.size() < 2 || layers.size() != net.spec.widths.size() - 1)
      throw ConfigError("network JSON: layer count does not match widths");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& lj = layers[l];
      const Index in = net.spec.widths[l], out = net.spec.widths[l + 1];
      const auto w = lj.at("w").get<std::vector<double>>();
      if (static_cast<Index>(w.size()) != in * out)
        throw ConfigError("network JSON: layer " + std::to_string(l) + " weight size mismatch");
      Layer layer;
      layer.w.resize(in, out);
      for (Index r = 0; r < in; ++r)
        for (Index c = 0; c < out; ++c) layer.w(r, c) = w[static_cast<std::size_t>(r * out + c)];
      layer.b = lj.contains("b") ? detail::json_vector(lj["b"]) : Vector();
      layer.c0 = lj.contains("c0") ? detail::json_vector(lj["c0"]) : Vector();
      layer.c1 = lj.contains("c1") ? detail::json_vector(lj["c1"]) : Vector();
      net.spec.has_bias.push_back(layer.b.size() > 0);
      net.layers.push_back(std::move(layer));
    }
    net.validate();
    return net;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("network JSON: ") + e.what());
  }
}

}  // namespace tslab
