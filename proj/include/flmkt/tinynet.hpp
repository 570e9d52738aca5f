#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <vector>

#include "flmkt/errors.hpp"
#include "flmkt/rng.hpp"
#include "json.hpp"

// Dense MLP engine: forward, exact reverse-mode gradients, SGD. Hidden
// layers are ReLU; the output is raw (linear) or softmax. Everything is
// a plain value type so nets copy, snapshot and checkpoint freely.

namespace flmkt::net {

enum class Head { kLinear, kSoftmax };

template <typename Scalar>
struct DenseNet {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  std::vector<int> dims;
  std::vector<Matrix> weights;  // weights[l]: dims[l+1] x dims[l]
  std::vector<Vector> biases;
  Head head = Head::kLinear;
  std::uint64_t revision = 0;  // bumped on every parameter change

  int layer_count() const { return static_cast<int>(weights.size()); }
  int in_dim() const { return dims.front(); }
  int out_dim() const { return dims.back(); }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (int l = 0; l < layer_count(); ++l)
      n += static_cast<std::size_t>(weights[l].size() + biases[l].size());
    return n;
  }
};

template <typename Scalar>
struct Tape {
  using Vector = typename DenseNet<Scalar>::Vector;
  std::uint64_t revision = 0;
  Vector input;
  std::vector<Vector> pre;   // z_l before activation
  std::vector<Vector> post;  // a_l after activation / head
};

template <typename Scalar>
struct Gradients {
  using Matrix = typename DenseNet<Scalar>::Matrix;
  using Vector = typename DenseNet<Scalar>::Vector;
  std::vector<Matrix> d_weights;
  std::vector<Vector> d_biases;
  Vector d_input;

  bool all_finite() const {
    for (const auto& m : d_weights)
      if (!m.allFinite()) return false;
    for (const auto& v : d_biases)
      if (!v.allFinite()) return false;
    return true;
  }

  Scalar squared_norm() const {
    Scalar s = 0;
    for (const auto& m : d_weights) s += m.squaredNorm();
    for (const auto& v : d_biases) s += v.squaredNorm();
    return s;
  }
};

// Uniform init in +-sqrt(6 / (fan_in + fan_out)), zero biases. Fill order
// (layer, row, column) is part of the determinism contract.
template <typename Scalar>
DenseNet<Scalar> make_net(const std::vector<int>& dims, Head head, rng::Engine& eng) {
  if (dims.size() < 2) throw StructuralError("make_net: need at least input and output dims");
  for (int d : dims)
    if (d < 1) throw StructuralError("make_net: non-positive layer dim");
  using Matrix = typename DenseNet<Scalar>::Matrix;
  using Vector = typename DenseNet<Scalar>::Vector;
  DenseNet<Scalar> net;
  net.dims = dims;
  net.head = head;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const int fan_in = dims[l];
    const int fan_out = dims[l + 1];
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    Matrix w(fan_out, fan_in);
    for (int r = 0; r < fan_out; ++r)
      for (int c = 0; c < fan_in; ++c)
        w(r, c) = static_cast<Scalar>(limit * (2.0 * rng::uniform01(eng) - 1.0));
    net.weights.push_back(std::move(w));
    net.biases.push_back(Vector::Zero(fan_out));
  }
  return net;
}

// Max-subtracted softmax over a plain vector or any Eigen expression.
template <typename Derived>
auto softmax(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  Vector z = logits;
  const Scalar m = z.maxCoeff();
  Vector e = (z.array() - m).exp().matrix();
  return Vector(e / e.sum());
}

template <typename Scalar>
typename DenseNet<Scalar>::Vector forward(const DenseNet<Scalar>& net,
                                          const typename DenseNet<Scalar>::Vector& x,
                                          Tape<Scalar>* tape = nullptr) {
  if (x.size() != net.in_dim())
    throw StructuralError("forward: input size does not match first layer");
  if (tape) {
    tape->revision = net.revision;
    tape->input = x;
    tape->pre.clear();
    tape->post.clear();
  }
  typename DenseNet<Scalar>::Vector a = x;
  const int last = net.layer_count() - 1;
  for (int l = 0; l <= last; ++l) {
    typename DenseNet<Scalar>::Vector z = net.weights[l] * a + net.biases[l];
    if (l < last) {
      a = z.cwiseMax(Scalar(0));
    } else if (net.head == Head::kSoftmax) {
      a = softmax(z);
    } else {
      a = z;
    }
    if (tape) {
      tape->pre.push_back(std::move(z));
      tape->post.push_back(a);
    }
  }
  return a;
}

// Reverse-mode gradients of a scalar objective given dL/d(output).
// d_input comes for free and lets callers chain nets together.
template <typename Scalar>
Gradients<Scalar> backward(const DenseNet<Scalar>& net, const Tape<Scalar>& tape,
                           const typename DenseNet<Scalar>::Vector& upstream) {
  const int last = net.layer_count() - 1;
  if (tape.revision != net.revision)
    throw StructuralError("backward: tape is stale, parameters changed since forward");
  if (static_cast<int>(tape.pre.size()) != last + 1)
    throw StructuralError("backward: tape layer count mismatch");
  if (upstream.size() != net.out_dim())
    throw StructuralError("backward: upstream gradient size mismatch");

  Gradients<Scalar> g;
  g.d_weights.resize(last + 1);
  g.d_biases.resize(last + 1);

  typename DenseNet<Scalar>::Vector dz;
  if (net.head == Head::kSoftmax) {
    const auto& y = tape.post[last];
    const Scalar dot = upstream.dot(y);
    dz = (y.array() * (upstream.array() - dot)).matrix();
  } else {
    dz = upstream;
  }
  for (int l = last; l >= 0; --l) {
    const auto& a_prev = l == 0 ? tape.input : tape.post[l - 1];
    g.d_weights[l] = dz * a_prev.transpose();
    g.d_biases[l] = dz;
    typename DenseNet<Scalar>::Vector da = net.weights[l].transpose() * dz;
    if (l > 0) {
      dz = ((tape.pre[l - 1].array() > Scalar(0)).template cast<Scalar>() * da.array()).matrix();
    } else {
      g.d_input = std::move(da);
    }
  }
  return g;
}

template <typename Scalar>
Gradients<Scalar> zero_gradients(const DenseNet<Scalar>& net) {
  using Matrix = typename DenseNet<Scalar>::Matrix;
  using Vector = typename DenseNet<Scalar>::Vector;
  Gradients<Scalar> g;
  for (int l = 0; l < net.layer_count(); ++l) {
    g.d_weights.push_back(Matrix::Zero(net.weights[l].rows(), net.weights[l].cols()));
    g.d_biases.push_back(Vector::Zero(net.biases[l].size()));
  }
  g.d_input = Vector::Zero(net.in_dim());
  return g;
}

template <typename Scalar>
void accumulate(Gradients<Scalar>& into, const Gradients<Scalar>& g, Scalar scale = Scalar(1)) {
  if (into.d_weights.size() != g.d_weights.size())
    throw StructuralError("accumulate: gradient layer count mismatch");
  for (std::size_t l = 0; l < g.d_weights.size(); ++l) {
    into.d_weights[l] += scale * g.d_weights[l];
    into.d_biases[l] += scale * g.d_biases[l];
  }
  if (into.d_input.size() == g.d_input.size() && g.d_input.size() > 0)
    into.d_input += scale * g.d_input;
}

template <typename Scalar>
void sgd_step(DenseNet<Scalar>& net, const Gradients<Scalar>& g, Scalar lr) {
  if (lr < Scalar(0)) throw ConfigError("sgd_step: negative learning rate");
  if (static_cast<int>(g.d_weights.size()) != net.layer_count())
    throw StructuralError("sgd_step: gradient layer count mismatch");
  if (!g.all_finite()) throw TrainingError("sgd_step: non-finite gradients");
  for (int l = 0; l < net.layer_count(); ++l) {
    net.weights[l] -= lr * g.d_weights[l];
    net.biases[l] -= lr * g.d_biases[l];
  }
  ++net.revision;
}

// Parameters as one flat vector (layer order, column-major weights, then
// biases per layer). Round-trips exactly with set_param_vector.
template <typename Scalar>
typename DenseNet<Scalar>::Vector param_vector(const DenseNet<Scalar>& net) {
  using Vector = typename DenseNet<Scalar>::Vector;
  Vector out(static_cast<Eigen::Index>(net.param_count()));
  Eigen::Index at = 0;
  for (int l = 0; l < net.layer_count(); ++l) {
    const auto& w = net.weights[l];
    out.segment(at, w.size()) = Eigen::Map<const Vector>(w.data(), w.size());
    at += w.size();
    out.segment(at, net.biases[l].size()) = net.biases[l];
    at += net.biases[l].size();
  }
  return out;
}

template <typename Scalar>
void set_param_vector(DenseNet<Scalar>& net, const typename DenseNet<Scalar>::Vector& flat) {
  using Vector = typename DenseNet<Scalar>::Vector;
  if (flat.size() != static_cast<Eigen::Index>(net.param_count()))
    throw StructuralError("set_param_vector: flat size does not match parameter count");
  Eigen::Index at = 0;
  for (int l = 0; l < net.layer_count(); ++l) {
    auto& w = net.weights[l];
    Eigen::Map<Vector>(w.data(), w.size()) = flat.segment(at, w.size());
    at += w.size();
    net.biases[l] = flat.segment(at, net.biases[l].size());
    at += net.biases[l].size();
  }
  ++net.revision;
}

// Lossless JSON checkpoints (doubles survive the round trip bit-exactly).
template <typename Scalar>
nlohmann::json net_to_json(const DenseNet<Scalar>& net) {
  nlohmann::json j;
  j["dims"] = net.dims;
  j["head"] = net.head == Head::kSoftmax ? "softmax" : "linear";
  nlohmann::json layers = nlohmann::json::array();
  for (int l = 0; l < net.layer_count(); ++l) {
    nlohmann::json layer;
    nlohmann::json w = nlohmann::json::array();
    for (Eigen::Index r = 0; r < net.weights[l].rows(); ++r) {
      nlohmann::json row = nlohmann::json::array();
      for (Eigen::Index c = 0; c < net.weights[l].cols(); ++c)
        row.push_back(static_cast<double>(net.weights[l](r, c)));
      w.push_back(std::move(row));
    }
    layer["weights"] = std::move(w);
    nlohmann::json b = nlohmann::json::array();
    for (Eigen::Index r = 0; r < net.biases[l].size(); ++r)
      b.push_back(static_cast<double>(net.biases[l](r)));
    layer["biases"] = std::move(b);
    layers.push_back(std::move(layer));
  }
  j["layers"] = std::move(layers);
  return j;
}

template <typename Scalar>
DenseNet<Scalar> net_from_json(const nlohmann::json& j) {
  DenseNet<Scalar> net;
  net.dims = j.at("dims").get<std::vector<int>>();
  const auto head = j.at("head").get<std::string>();
  if (head == "softmax")
    net.head = Head::kSoftmax;
  else if (head == "linear")
    net.head = Head::kLinear;
  else
    throw StructuralError("net_from_json: unknown head '" + head + "'");
  const auto& layers = j.at("layers");
  if (layers.size() + 1 != net.dims.size())
    throw StructuralError("net_from_json: layer count does not match dims");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& w = layers.at(l).at("weights");
    typename DenseNet<Scalar>::Matrix m(net.dims[l + 1], net.dims[l]);
    if (static_cast<int>(w.size()) != net.dims[l + 1])
      throw StructuralError("net_from_json: weight row count mismatch");
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      const auto& row = w.at(r);
      if (static_cast<int>(row.size()) != net.dims[l])
        throw StructuralError("net_from_json: weight column count mismatch");
      for (Eigen::Index c = 0; c < m.cols(); ++c)
        m(r, c) = static_cast<Scalar>(row.at(c).get<double>());
    }
    net.weights.push_back(std::move(m));
    const auto& b = layers.at(l).at("biases");
    typename DenseNet<Scalar>::Vector v(net.dims[l + 1]);
    for (Eigen::Index r = 0; r < v.size(); ++r) v(r) = static_cast<Scalar>(b.at(r).get<double>());
    net.biases.push_back(std::move(v));
  }
  return net;
}

using DenseNetD = DenseNet<double>;
using TapeD = Tape<double>;
using GradientsD = Gradients<double>;

}  // namespace flmkt::net
