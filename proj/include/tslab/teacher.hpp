#pragma once

// Teacher networks on a discrete weight grid, students initialized at a
// controlled distance from the teacher, and Gaussian input streams.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "tslab/error.hpp"
#include "tslab/linalg.hpp"
#include "tslab/net.hpp"

namespace tslab {

struct TeacherSpec {
  std::vector<Index> widths;  // input first
  std::vector<double> weight_grid{-0.5, -0.25, 0.0, 0.25, 0.5};
  double bias_lo = -0.5;
  double bias_hi = 0.5;
  bool bias = true;
  std::uint64_t seed = 0;
};

inline constexpr int kColumnAttempts = 1000;

/// Teacher with every weight drawn uniformly from the nonzero grid values,
/// pairwise-distinct columns within each layer, and U[bias_lo, bias_hi] biases.
inline Network make_teacher(const TeacherSpec& ts) {
  std::vector<double> grid;
  for (double v : ts.weight_grid)
    if (v != 0.0 && std::find(grid.begin(), grid.end(), v) == grid.end()) grid.push_back(v);
  if (grid.size() < 2) throw ConfigError("teacher weight grid needs at least 2 distinct nonzero values");
  if (ts.bias_hi < ts.bias_lo) throw ConfigError("teacher bias range is empty");

  NetworkSpec spec = NetworkSpec::make(ts.widths, BnMode::none, ts.bias);
  spec.validate();
  Rng rng(derive_seed(ts.seed, 0x7EAC));
  Network net;
  net.spec = spec;
  for (Index l = 0; l < spec.num_layers(); ++l) {
    const Index in = spec.widths[l], out = spec.widths[l + 1];
    const double patterns = static_cast<double>(in) * std::log(static_cast<double>(grid.size()));
    if (patterns < std::log(static_cast<double>(out)))
      throw ConfigError("layer " + std::to_string(l) + ": width " + std::to_string(out) +
                        " exceeds the number of distinct grid columns");
    Layer layer;
    layer.w.resize(in, out);
    for (Index c = 0; c < out; ++c) {
      bool placed = false;
      for (int attempt = 0; attempt < kColumnAttempts && !placed; ++attempt) {
        for (Index r = 0; r < in; ++r) layer.w(r, c) = grid[rng.index(grid.size())];
        placed = true;
        for (Index p = 0; p < c && placed; ++p)
          if (layer.w.col(p) == layer.w.col(c)) placed = false;
      }
      if (!placed)
        throw ConfigError("layer " + std::to_string(l) + ": could not draw distinct column " +
                          std::to_string(c) + " after " + std::to_string(kColumnAttempts) +
                          " attempts");
    }
    if (ts.bias) {
      layer.b.resize(out);
      for (Index c = 0; c < out; ++c) layer.b(c) = rng.uniform(ts.bias_lo, ts.bias_hi);
    }
    net.layers.push_back(std::move(layer));
  }
  return net;
}

struct StudentInit {
  Index overparam = 1;  // k: student hidden width = k * teacher hidden width
  double p_w = 0.0;
  double p_v = 0.0;
  std::uint64_t seed = 0;
  BnMode bn_mode = BnMode::none;
};

/// Gaussian matrix with unit-norm columns.
inline Matrix normalized_noise(Index rows, Index cols, Rng& rng) {
  return column_normalize(rng.gaussian(rows, cols));
}

/// Student of the teacher's depth. In every hidden layer the first m columns
/// (the u-set) are column_normalize(p_w * w*_j + noise), where w*_j is the
/// unit-normalized teacher column embedded into the rows of the u-set below;
/// the remaining columns (the r-set) are normalized noise. The top layer is
/// unit-column noise with p_v * V* added to the u-rows, rows left unnormalized.
inline Network make_student(const Network& teacher, const StudentInit& init) {
  if (init.overparam < 1) throw ConfigError("overparam factor must be >= 1");
  if (init.p_w < 0.0 || init.p_v < 0.0) throw ConfigError("proximity factors must be >= 0");
  teacher.validate();

  const NetworkSpec& ts = teacher.spec;
  std::vector<Index> widths = ts.widths;
  for (std::size_t i = 1; i + 1 < widths.size(); ++i) widths[i] *= init.overparam;
  NetworkSpec spec = NetworkSpec::make(widths, init.bn_mode);
  for (Index l = 0; l < spec.num_layers(); ++l)
    spec.has_bias[l] = ts.has_bias[l] && !spec.has_bn(l);

  Rng rng(derive_seed(init.seed, 0x5708));
  Network net;
  net.spec = spec;
  for (Index l = 0; l < spec.num_layers(); ++l) {
    const Index in = widths[l], out = widths[l + 1];
    const Index t_in = ts.widths[l], t_out = ts.widths[l + 1];
    Matrix embedded = Matrix::Zero(in, t_out);
    embedded.topRows(t_in) = teacher.layers[l].w;
    Layer layer;
    if (!spec.is_top(l)) {
      if (init.p_w > 0.0) embedded = column_normalize(embedded);
      layer.w = normalized_noise(in, out, rng);
      layer.w.leftCols(t_out) = column_normalize(init.p_w * embedded + layer.w.leftCols(t_out));
    } else {
      layer.w = normalized_noise(in, out, rng);
      layer.w += init.p_v * embedded;
    }
    if (spec.has_bias[l]) layer.b = Vector::Zero(out);
    if (spec.has_bn(l)) {
      layer.c0 = Vector::Ones(out);
      layer.c1 = Vector::Zero(out);
    }
    net.layers.push_back(std::move(layer));
  }
  return net;
}

enum class StreamMode { infinite, finite };

struct StreamSpec {
  Index dim = 20;
  double stddev = 10.0;
  StreamMode mode = StreamMode::infinite;
  Index n_samples = 0;  // pool size in finite mode
  std::uint64_t seed = 0;
};

/// i.i.d. Gaussian inputs. Infinite mode draws fresh samples; finite mode
/// cycles through a fixed pool in a reshuffled order every pass.
class GausStream {
 public:
  explicit GausStream(const StreamSpec& s) : spec_(s), rng_(derive_seed(s.seed, 0x6A05)) {
    if (s.dim < 1) throw ConfigError("stream dim must be >= 1");
    if (!(s.stddev > 0.0)) throw ConfigError("stream std must be positive");
    if (s.mode == StreamMode::finite) {
      if (s.n_samples < 1) throw ConfigError("finite stream needs n_samples >= 1");
      pool_ = rng_.gaussian(s.n_samples, s.dim, s.stddev);
      order_.resize(static_cast<std::size_t>(s.n_samples));
      reshuffle();
    }
  }

  const StreamSpec& spec() const { return spec_; }
  /// The fixed sample pool (finite mode only).
  const Matrix& pool() const { return pool_; }

  Matrix next_batch(Index batch_size) {
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (spec_.mode == StreamMode::infinite) {
      Matrix m(batch_size, spec_.dim);
      for (Index r = 0; r < batch_size; ++r)
        for (Index c = 0; c < spec_.dim; ++c) m(r, c) = spec_.stddev * rng_.normal();
      return m;
    }
    Matrix m(batch_size, spec_.dim);
    for (Index r = 0; r < batch_size; ++r) {
      if (cursor_ == order_.size()) reshuffle();
      m.row(r) = pool_.row(order_[cursor_++]);
    }
    return m;
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), Index{0});
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.index(i)]);
    cursor_ = 0;
  }

  StreamSpec spec_;
  Rng rng_;
  Matrix pool_;
  std::vector<Index> order_;
  std::size_t cursor_ = 0;
};

/// Raw teacher outputs used as soft regression targets.
inline Matrix teacher_labels(const Network& teacher, const Matrix& batch) {
  return forward(teacher, batch).output();
}

}  // namespace tslab
