#pragma once

// Electron-optics algebra: aberration coefficient indexing, the wave
// aberration phase, the beam-tilt induced aberration transform and the
// linear map from baseline aberrations to the observed image shift.
//
// Complex coefficients are packed into real vectors. Slots are ordered by
// ascending order m, then ascending foldness n; a complex coefficient (n > 0)
// occupies two slots (real part first), a rotationally symmetric one (n = 0)
// a single real slot.

#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <map>
#include <numbers>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "tiltab/errors.hpp"

namespace tiltab {

inline constexpr int kMaxSupportedOrder = 8;

using Complex = std::complex<double>;

struct AberrationIndex {
  int m = 1;  // order
  int n = 1;  // foldness

  constexpr bool valid() const { return m > 0 && n >= 0 && n <= m && (m - n) % 2 == 0; }
  constexpr bool is_complex() const { return n > 0; }
  constexpr int width() const { return is_complex() ? 2 : 1; }

  friend constexpr bool operator==(const AberrationIndex&, const AberrationIndex&) = default;
};

inline std::string label(const AberrationIndex& idx) {
  return "c" + std::to_string(idx.m) + std::to_string(idx.n);
}

struct Tilt {
  double tx = 0.0;
  double ty = 0.0;

  Complex complex() const { return {tx, ty}; }
  double norm() const { return std::hypot(tx, ty); }

  friend bool operator==(const Tilt&, const Tilt&) = default;
};

class AberrationBasis {
 public:
  AberrationBasis() : AberrationBasis(1) {}

  explicit AberrationBasis(int max_order) : max_order_(max_order) {
    require(max_order >= 1, "aberration basis: max order must be >= 1");
    require(max_order <= kMaxSupportedOrder, "aberration basis: max order must be <= 8");
    for (int m = 1; m <= max_order; ++m) {
      for (int n = m % 2; n <= m; n += 2) {
        indices_.push_back({m, n});
        offsets_.push_back(real_dim_);
        real_dim_ += indices_.back().width();
      }
    }
  }

  int max_order() const { return max_order_; }
  int real_dim() const { return real_dim_; }
  int size() const { return static_cast<int>(indices_.size()); }
  const std::vector<AberrationIndex>& indices() const { return indices_; }

  // First real slot occupied by coefficient i.
  int offset(int i) const { return offsets_.at(static_cast<std::size_t>(i)); }

  // Position of (m, n) in indices(), or -1.
  int find(int m, int n) const {
    for (int i = 0; i < size(); ++i) {
      if (indices_[static_cast<std::size_t>(i)] == AberrationIndex{m, n}) return i;
    }
    return -1;
  }

  // Real slot of the given coefficient part; imag is ignored for n = 0 slots.
  int slot(int m, int n, bool imag = false) const {
    const int i = find(m, n);
    require(i >= 0, "aberration basis: coefficient c" + std::to_string(m) + std::to_string(n) +
                        " not in basis");
    const AberrationIndex& idx = indices_[static_cast<std::size_t>(i)];
    require(!imag || idx.is_complex(), "aberration basis: real-valued coefficient has no imaginary slot");
    return offset(i) + (imag ? 1 : 0);
  }

  Complex coefficient(const Eigen::Ref<const Eigen::VectorXd>& values, int i) const {
    const int o = offset(i);
    return indices_[static_cast<std::size_t>(i)].is_complex() ? Complex(values(o), values(o + 1))
                                                              : Complex(values(o), 0.0);
  }

  void set_coefficient(Eigen::Ref<Eigen::VectorXd> values, int i, Complex c) const {
    const int o = offset(i);
    values(o) = c.real();
    if (indices_[static_cast<std::size_t>(i)].is_complex()) values(o + 1) = c.imag();
  }

  // Human-readable slot names, e.g. "Re c11", "c20".
  std::vector<std::string> slot_labels() const {
    std::vector<std::string> out;
    for (const auto& idx : indices_) {
      if (idx.is_complex()) {
        out.push_back("Re " + label(idx));
        out.push_back("Im " + label(idx));
      } else {
        out.push_back(label(idx));
      }
    }
    return out;
  }

  friend bool operator==(const AberrationBasis& a, const AberrationBasis& b) {
    return a.max_order_ == b.max_order_;
  }

 private:
  int max_order_ = 1;
  int real_dim_ = 0;
  std::vector<AberrationIndex> indices_;
  std::vector<int> offsets_;
};

inline AberrationBasis enumerate_basis(int max_order) { return AberrationBasis(max_order); }

struct AberrationVector {
  AberrationBasis basis;
  Eigen::VectorXd values;

  AberrationVector() = default;
  explicit AberrationVector(AberrationBasis b)
      : basis(std::move(b)), values(Eigen::VectorXd::Zero(basis.real_dim())) {}
  AberrationVector(AberrationBasis b, Eigen::VectorXd v) : basis(std::move(b)), values(std::move(v)) {
    require(values.size() == basis.real_dim(), "aberration vector: length does not match basis");
  }
};

namespace detail {

// Exact binomial coefficients; C(n, k) = 0 outside 0 <= k <= n.
inline double binomial(int n, int k) {
  static const auto table = [] {
    std::array<std::array<std::int64_t, 2 * kMaxSupportedOrder + 1>, 2 * kMaxSupportedOrder + 1> t{};
    for (std::size_t i = 0; i < t.size(); ++i) {
      t[i][0] = 1;
      for (std::size_t j = 1; j <= i; ++j) t[i][j] = t[i - 1][j - 1] + (j < i ? t[i - 1][j] : 0);
    }
    return t;
  }();
  if (n < 0 || k < 0 || k > n) return 0.0;
  return static_cast<double>(table[static_cast<std::size_t>(n)][static_cast<std::size_t>(k)]);
}

}  // namespace detail

// χ(g): sum of (2π/λ)(|c|/m)(λ|g|)^m cos(n·arg g − n·arg c) over the basis.
// Rotationally symmetric terms (n = 0) use the signed real coefficient.
inline double wave_aberration_phase(const AberrationVector& c, Complex g, double wavelength) {
  require(wavelength > 0.0, "wave aberration phase: wavelength must be positive");
  const double g_abs = std::abs(g);
  const double g_arg = std::arg(g);
  double phase = 0.0;
  for (int i = 0; i < c.basis.size(); ++i) {
    const AberrationIndex idx = c.basis.indices()[static_cast<std::size_t>(i)];
    const Complex coeff = c.basis.coefficient(c.values, i);
    const double radial = std::pow(wavelength * g_abs, idx.m) / idx.m;
    double angular = 0.0;
    if (idx.n == 0) {
      angular = coeff.real();
    } else {
      angular = std::abs(coeff) * std::cos(idx.n * g_arg - idx.n * std::arg(coeff));
    }
    phase += radial * angular;
  }
  return 2.0 * std::numbers::pi / wavelength * phase;
}

// Phase sampled on a square lattice spanning [-g_max, g_max] in both Re(g)
// and Im(g). Row i holds Im(g) = -g_max + i·step, column j holds Re(g).
struct PhasePlate {
  double g_max = 0.0;
  int resolution = 0;
  Eigen::MatrixXd phase;

  double axis_value(int i) const {
    return -g_max + 2.0 * g_max * static_cast<double>(i) / static_cast<double>(resolution - 1);
  }
};

inline PhasePlate phase_plate_grid(const AberrationVector& c, double wavelength, double g_max,
                                   int resolution) {
  require(g_max > 0.0, "phase plate: g_max must be positive");
  require(resolution >= 2, "phase plate: resolution must be >= 2");
  PhasePlate plate{g_max, resolution, Eigen::MatrixXd(resolution, resolution)};
  for (int i = 0; i < resolution; ++i) {
    for (int j = 0; j < resolution; ++j) {
      plate.phase(i, j) =
          wave_aberration_phase(c, Complex(plate.axis_value(j), plate.axis_value(i)), wavelength);
    }
  }
  return plate;
}

inline void write_phase_plate_csv(std::ostream& os, const PhasePlate& plate) {
  os << "# g_min=" << -plate.g_max << " g_max=" << plate.g_max << " resolution=" << plate.resolution
     << " rows=Im(g) ascending cols=Re(g) ascending\n";
  os.precision(17);
  for (int i = 0; i < plate.resolution; ++i) {
    for (int j = 0; j < plate.resolution; ++j) {
      if (j) os << ',';
      os << plate.phase(i, j);
    }
    os << '\n';
  }
}

// Precomputed expansion of the tilt-induced aberration transform. Every
// effective coefficient c'_{mn} is a sum of terms
//   weight · (t*)^p · t^q · (c_src or conj(c_src)).
class TiltTransform {
 public:
  struct Term {
    double weight = 0.0;
    int conj_power = 0;  // exponent of t*
    int power = 0;       // exponent of t
    int source = 0;      // coefficient position in the basis
    bool conjugate = false;
  };

  explicit TiltTransform(AberrationBasis basis) : basis_(std::move(basis)), terms_(basis_.size()) {
    const int order = basis_.max_order();
    for (int target = 0; target < basis_.size(); ++target) {
      const AberrationIndex out = basis_.indices()[static_cast<std::size_t>(target)];
      const int alpha = (out.m + out.n) / 2;
      const int gamma = (out.m - out.n) / 2;
      const double rho = alpha == gamma ? 0.5 : 1.0;
      auto& list = terms_[static_cast<std::size_t>(target)];
      for (int beta = alpha; beta <= order; ++beta) {
        const int delta_max = std::min(beta, order - beta);
        for (int delta = gamma; delta <= delta_max; ++delta) {
          const int source = basis_.find(beta + delta, beta - delta);
          if (source < 0) continue;
          const double scale = rho * (alpha + gamma) / static_cast<double>(beta + delta);
          const double direct = detail::binomial(beta, alpha) * detail::binomial(delta, gamma);
          if (direct != 0.0) {
            list.push_back({scale * direct, beta - alpha, delta - gamma, source, false});
          }
          const double mirrored = detail::binomial(beta, gamma) * detail::binomial(delta, alpha);
          if (mirrored != 0.0) {
            list.push_back({scale * mirrored, delta - alpha, beta - gamma, source, true});
          }
        }
      }
    }
  }

  const AberrationBasis& basis() const { return basis_; }
  const std::vector<Term>& terms(int target) const { return terms_.at(static_cast<std::size_t>(target)); }

  Eigen::VectorXd apply(const Eigen::Ref<const Eigen::VectorXd>& c, Tilt t) const {
    require(c.size() == basis_.real_dim(), "tilt transform: vector length does not match basis");
    const int order = basis_.max_order();
    std::vector<Complex> tp(static_cast<std::size_t>(order) + 1), tcp(static_cast<std::size_t>(order) + 1);
    tp[0] = tcp[0] = 1.0;
    for (std::size_t i = 1; i < tp.size(); ++i) {
      tp[i] = tp[i - 1] * t.complex();
      tcp[i] = tcp[i - 1] * std::conj(t.complex());
    }
    std::vector<Complex> src(static_cast<std::size_t>(basis_.size()));
    for (int i = 0; i < basis_.size(); ++i) src[static_cast<std::size_t>(i)] = basis_.coefficient(c, i);

    Eigen::VectorXd out(basis_.real_dim());
    for (int target = 0; target < basis_.size(); ++target) {
      Complex acc = 0.0;
      for (const Term& term : terms_[static_cast<std::size_t>(target)]) {
        const Complex s = src[static_cast<std::size_t>(term.source)];
        acc += term.weight * tcp[static_cast<std::size_t>(term.conj_power)] *
               tp[static_cast<std::size_t>(term.power)] * (term.conjugate ? std::conj(s) : s);
      }
      basis_.set_coefficient(out, target, acc);
    }
    return out;
  }

 private:
  AberrationBasis basis_;
  std::vector<std::vector<Term>> terms_;
};

inline AberrationVector tilt_transform(const AberrationVector& c, Tilt t) {
  return AberrationVector(c.basis, TiltTransform(c.basis).apply(c.values, t));
}

struct Monomial {
  int a = 0;  // exponent of tx
  int b = 0;  // exponent of ty
  double coeff = 0.0;
};

// Image-shift rows of the tilt transform, expanded into real polynomials of
// (tx, ty). Entry (row, col) is the polynomial multiplying basis slot col in
// Re c'11 (row 0) or Im c'11 (row 1).
class TiltPolynomialTable {
 public:
  explicit TiltPolynomialTable(AberrationBasis basis)
      : basis_(std::move(basis)),
        entries_(2, std::vector<std::vector<Monomial>>(static_cast<std::size_t>(basis_.real_dim()))) {
    const TiltTransform transform(basis_);
    const int shift = basis_.find(1, 1);
    for (int i = 0; i < basis_.size(); ++i) {
      const bool is_complex = basis_.indices()[static_cast<std::size_t>(i)].is_complex();
      for (int part = 0; part < (is_complex ? 2 : 1); ++part) {
        const Complex unit = part == 0 ? Complex(1.0, 0.0) : Complex(0.0, 1.0);
        std::map<std::pair<int, int>, Complex> poly;
        for (const auto& term : transform.terms(shift)) {
          if (term.source != i) continue;
          const Complex factor = term.weight * (term.conjugate ? std::conj(unit) : unit);
          expand_into(poly, factor, term.conj_power, term.power);
        }
        const int col = basis_.offset(i) + part;
        for (const auto& [exps, coeff] : poly) {
          if (coeff.real() != 0.0) entries_[0][static_cast<std::size_t>(col)].push_back({exps.first, exps.second, coeff.real()});
          if (coeff.imag() != 0.0) entries_[1][static_cast<std::size_t>(col)].push_back({exps.first, exps.second, coeff.imag()});
        }
      }
    }
  }

  const AberrationBasis& basis() const { return basis_; }
  int cols() const { return basis_.real_dim(); }
  const std::vector<Monomial>& entry(int row, int col) const {
    return entries_.at(static_cast<std::size_t>(row)).at(static_cast<std::size_t>(col));
  }

  // Ψ(θ): 2 x l matrix with Ψ(θ)·c equal to the image-shift rows of the transform.
  Eigen::MatrixXd evaluate(Tilt theta) const {
    const auto [px, py] = powers(theta);
    Eigen::MatrixXd psi = Eigen::MatrixXd::Zero(2, cols());
    for (int r = 0; r < 2; ++r) {
      for (int c = 0; c < cols(); ++c) {
        double v = 0.0;
        for (const Monomial& mono : entry(r, c)) v += mono.coeff * px[mono.a] * py[mono.b];
        psi(r, c) = v;
      }
    }
    return psi;
  }

  // Exact (∂Ψ/∂tx, ∂Ψ/∂ty).
  std::pair<Eigen::MatrixXd, Eigen::MatrixXd> gradient(Tilt theta) const {
    const auto [px, py] = powers(theta);
    Eigen::MatrixXd dx = Eigen::MatrixXd::Zero(2, cols());
    Eigen::MatrixXd dy = Eigen::MatrixXd::Zero(2, cols());
    for (int r = 0; r < 2; ++r) {
      for (int c = 0; c < cols(); ++c) {
        for (const Monomial& mono : entry(r, c)) {
          if (mono.a > 0) dx(r, c) += mono.coeff * mono.a * px[mono.a - 1] * py[mono.b];
          if (mono.b > 0) dy(r, c) += mono.coeff * mono.b * px[mono.a] * py[mono.b - 1];
        }
      }
    }
    return {std::move(dx), std::move(dy)};
  }

 private:
  static void expand_into(std::map<std::pair<int, int>, Complex>& poly, Complex factor, int conj_power,
                          int power) {
    // (tx - i ty)^p (tx + i ty)^q
    // Powers of i by table lookup so that the expansion stays exact.
    static constexpr std::array<std::pair<double, double>, 4> kPowersOfI{{{1, 0}, {0, 1}, {-1, 0}, {0, -1}}};
    for (int j = 0; j <= conj_power; ++j) {
      for (int k = 0; k <= power; ++k) {
        const auto [re, im] = kPowersOfI[static_cast<std::size_t>((3 * j + k) % 4)];
        const Complex coeff = factor * detail::binomial(conj_power, j) * detail::binomial(power, k) *
                              Complex(re, im);
        poly[{conj_power + power - j - k, j + k}] += coeff;
      }
    }
  }

  std::pair<std::array<double, kMaxSupportedOrder + 1>, std::array<double, kMaxSupportedOrder + 1>> powers(
      Tilt theta) const {
    std::array<double, kMaxSupportedOrder + 1> px{}, py{};
    px[0] = py[0] = 1.0;
    for (std::size_t i = 1; i < px.size(); ++i) {
      px[i] = px[i - 1] * theta.tx;
      py[i] = py[i - 1] * theta.ty;
    }
    return {px, py};
  }

  AberrationBasis basis_;
  std::vector<std::vector<std::vector<Monomial>>> entries_;
};

inline TiltPolynomialTable build_tilt_polynomial_table(const AberrationBasis& basis) {
  return TiltPolynomialTable(basis);
}

inline Eigen::MatrixXd observation_matrix(const TiltPolynomialTable& table, Tilt theta) {
  return table.evaluate(theta);
}

inline std::pair<Eigen::MatrixXd, Eigen::MatrixXd> observation_matrix_gradient(const TiltPolynomialTable& table,
                                                                              Tilt theta) {
  return table.gradient(theta);
}

}  // namespace tiltab
