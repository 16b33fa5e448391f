#pragma once

#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "lrvb/dual.hpp"
#include "lrvb/errors.hpp"
#include "lrvb/expfam.hpp"

namespace lrvb {

/// A scalar function of (mean parameters, hyperparameters), instantiated for
/// every scalar type the library differentiates with.
struct ScalarObjective {
  std::function<double(const VecT<double>&, const VecT<double>&)> f0;
  std::function<D1(const VecT<D1>&, const VecT<D1>&)> f1;
  std::function<D2(const VecT<D2>&, const VecT<D2>&)> f2;

  template <typename F>
  static ScalarObjective from(F f) {
    return {f, f, f};
  }

  template <typename T>
  T operator()(const VecT<T>& m, const VecT<T>& alpha) const {
    if constexpr (std::is_same_v<T, double>) return f0(m, alpha);
    else if constexpr (std::is_same_v<T, D1>) return f1(m, alpha);
    else return f2(m, alpha);
  }

  explicit operator bool() const { return static_cast<bool>(f0); }
};

struct BlockLayout {
  std::string name;
  BlockShape shape;
  std::size_t offset = 0;  // first index of the block inside the full mean vector
};

/// A posterior expectation tracked by reports and oracle comparisons:
/// h(m) = grad . m, plus the same quantity evaluated at a parameter draw.
struct TrackedQuantity {
  std::string name;
  Eigen::VectorXd gradient;
};

/// Exact (unnormalized) log posterior over unconstrained parameter
/// coordinates z, including the Jacobian of the map to the natural
/// parameterization. Consumed by the quadrature and MCMC oracles.
struct ParameterDensity {
  std::size_t dim = 0;
  std::vector<std::string> coordinate_names;
  std::function<double(const Eigen::VectorXd& z, const Eigen::VectorXd& alpha)> log_joint;
  /// Values of the model's tracked quantities at z (aligned with ModelSpec::quantities).
  std::function<Eigen::VectorXd(const Eigen::VectorXd& z)> quantities;
  /// A reasonable starting point given fitted mean parameters.
  std::function<Eigen::VectorXd(const Eigen::VectorXd& m)> init_from_mean;
};

/// log p(theta_i | alpha) for a block whose prior factors from the rest.
using PriorMarginal = std::function<double(const Eigen::VectorXd& point, const Eigen::VectorXd& alpha)>;

/// Data summary for models with closed-form posteriors.
struct ConjugateForm {
  enum class Kind { NormalNormal, NormalInverseGamma, GaussianTarget } kind = Kind::NormalNormal;
  double count = 0.0;
  double sum = 0.0;
  double sum_squares = 0.0;
  double noise_variance = 1.0;  // NormalNormal only
  Eigen::MatrixXd precision;    // GaussianTarget only
};

struct ModelSpec {
  std::string name;
  std::vector<BlockLayout> blocks;
  std::vector<std::string> hyper_names;
  Eigen::VectorXd hyperparams;
  ScalarObjective expected_log_lik;
  ScalarObjective expected_log_prior;
  Eigen::VectorXd default_init;
  std::vector<TrackedQuantity> quantities;
  std::map<std::size_t, PriorMarginal> prior_marginals;
  std::optional<ParameterDensity> parameter_density;
  std::optional<ConjugateForm> conjugate;
  std::uint64_t data_hash = 0;

  std::size_t mean_dim() const {
    return blocks.empty() ? 0 : blocks.back().offset + blocks.back().shape.stat_dim();
  }

  std::size_t block_index(const std::string& block_name) const {
    for (std::size_t i = 0; i < blocks.size(); ++i)
      if (blocks[i].name == block_name) return i;
    std::string valid;
    for (const auto& b : blocks) valid += (valid.empty() ? "" : ", ") + b.name;
    throw DomainError("unknown block '" + block_name + "'; valid blocks: " + valid);
  }

  std::size_t hyper_index(const std::string& key) const {
    for (std::size_t i = 0; i < hyper_names.size(); ++i)
      if (hyper_names[i] == key) return i;
    std::string valid;
    for (const auto& n : hyper_names) valid += (valid.empty() ? "" : ", ") + n;
    throw DomainError("unknown hyperparameter '" + key + "'; valid keys: " + valid);
  }

  const TrackedQuantity& quantity(const std::string& qname) const {
    for (const auto& q : quantities)
      if (q.name == qname) return q;
    std::string valid;
    for (const auto& q : quantities) valid += (valid.empty() ? "" : ", ") + q.name;
    throw DomainError("unknown quantity '" + qname + "'; valid quantities: " + valid);
  }

  Eigen::VectorXd block_mean(const Eigen::VectorXd& m, std::size_t i) const {
    const auto& b = blocks.at(i);
    return m.segment(static_cast<Eigen::Index>(b.offset), static_cast<Eigen::Index>(b.shape.stat_dim()));
  }

  ExpFamBlock block(const Eigen::VectorXd& m, std::size_t i) const {
    return ExpFamBlock::from_mean(blocks.at(i).shape, block_mean(m, i));
  }

  template <typename T>
  T expected_log_joint(const VecT<T>& m, const VecT<T>& alpha) const {
    return expected_log_lik(m, alpha) + expected_log_prior(m, alpha);
  }
};

/// Appends a block to a layout, returning its index.
inline std::size_t add_block(std::vector<BlockLayout>& blocks, std::string name, BlockShape shape) {
  const std::size_t offset = blocks.empty() ? 0 : blocks.back().offset + blocks.back().shape.stat_dim();
  blocks.push_back({std::move(name), shape, offset});
  return blocks.size() - 1;
}

/// Unit gradient selecting one mean coordinate.
inline Eigen::VectorXd unit_vector(std::size_t n, std::size_t i) {
  Eigen::VectorXd e = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  e(static_cast<Eigen::Index>(i)) = 1.0;
  return e;
}

/// FNV-1a over raw bytes; used for report metadata.
class Fnv1a {
 public:
  void add_bytes(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h_ ^= p[i];
      h_ *= 1099511628211ull;
    }
  }
  void add(double x) { add_bytes(&x, sizeof x); }
  void add(const std::string& s) { add_bytes(s.data(), s.size()); }
  void add(const Eigen::VectorXd& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) add(v(i));
  }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = 1469598103934665603ull;
};

inline std::uint64_t model_hash(const ModelSpec& model) {
  Fnv1a h;
  h.add(model.name);
  h.add(model.hyperparams);
  h.add_bytes(&model.data_hash, sizeof model.data_hash);
  return h.value();
}

}  // namespace lrvb
