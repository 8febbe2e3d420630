#include "mixtrain/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mixtrain/errors.hpp"

namespace mixtrain {

std::string to_string(Method method) {
  switch (method) {
    case Method::sl: return "sl";
    case Method::ssl_sl: return "ssl_sl";
    case Method::mixtraining: return "mixtraining";
  }
  return "?";
}

std::string to_string(Phase phase) {
  switch (phase) {
    case Phase::ssl: return "ssl";
    case Phase::mix: return "mix";
    case Phase::sl: return "sl";
  }
  return "?";
}

Method parse_method(const std::string& text) {
  if (text == "sl") return Method::sl;
  if (text == "ssl_sl") return Method::ssl_sl;
  if (text == "mixtraining") return Method::mixtraining;
  throw ConfigError("unknown method '" + text + "' (sl|ssl_sl|mixtraining)");
}

namespace {

std::size_t scaled_warmup(std::size_t paper_warmup, std::size_t epochs) {
  return (paper_warmup * epochs + 99) / 100;
}

void check_range(const char* name, double v, double lo, double hi, bool lo_open = false) {
  const bool ok = (lo_open ? v > lo : v >= lo) && v <= hi;
  if (!ok) {
    throw ConfigError(std::string(name) + "=" + std::to_string(v) + " outside " + (lo_open ? "(" : "[") +
                      std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
}

}  // namespace

std::size_t TrainConfig::effective_warmup_ssl() const {
  return warmup_ssl.value_or(scaled_warmup(20, e_ssl));
}

std::size_t TrainConfig::effective_warmup_sl() const {
  return warmup_sl.value_or(scaled_warmup(5, e_sl));
}

void TrainConfig::validate() const {
  check_range("rho", rho, 0.0, 1.0);
  check_range("alpha", alpha, 0.0, 1.0);
  check_range("lambda", lambda, 0.0, 1.0);
  check_range("p", p, 0.0, 1.0, true);
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(base_lr_ssl > 0.0)) throw ConfigError("base_lr_ssl must be positive");
  if (!(base_lr_sl > 0.0)) throw ConfigError("base_lr_sl must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("eps must be positive");
  if (method != Method::sl && e_ssl + e_sl == 0) throw ConfigError("no training epochs configured");
  if (method == Method::sl && e_sl == 0) throw ConfigError("method sl needs e_sl >= 1");
}

std::vector<PhaseSpan> PhaseSchedule::spans() const {
  std::vector<PhaseSpan> out;
  if (pure_ssl_epochs) out.push_back({Phase::ssl, pure_ssl_epochs});
  if (e_mix) out.push_back({Phase::mix, e_mix});
  if (pure_sl_epochs) out.push_back({Phase::sl, pure_sl_epochs});
  return out;
}

PhaseSchedule plan(const TrainConfig& cfg) {
  PhaseSchedule s;
  const std::size_t e_ssl = cfg.method == Method::sl ? 0 : cfg.e_ssl;
  if (cfg.method == Method::mixtraining)
    s.e_mix = static_cast<std::size_t>(std::floor(cfg.rho * static_cast<double>(std::min(e_ssl, cfg.e_sl))));
  s.pure_ssl_epochs = e_ssl - s.e_mix;
  s.pure_sl_epochs = cfg.e_sl - s.e_mix;
  s.total_epochs = e_ssl + cfg.e_sl - s.e_mix;
  return s;
}

double warmup_cosine(double base, std::size_t warmup, std::size_t epoch, std::size_t length) {
  if (epoch < warmup) return base * static_cast<double>(epoch + 1) / static_cast<double>(warmup);
  const double t = static_cast<double>(epoch - warmup) / static_cast<double>(length - warmup);
  return base * (1.0 + std::cos(std::numbers::pi * t)) / 2.0;
}

std::size_t phase_warmup(Phase phase, std::size_t phase_len, const TrainConfig& cfg) {
  switch (phase) {
    case Phase::ssl: return std::min(cfg.effective_warmup_ssl(), phase_len);
    case Phase::sl: return std::min(cfg.effective_warmup_sl(), phase_len);
    case Phase::mix: {
      if (cfg.e_ssl == 0) return 0;
      const std::size_t scaled = (cfg.effective_warmup_ssl() * phase_len + cfg.e_ssl - 1) / cfg.e_ssl;
      return std::min(scaled, phase_len);
    }
  }
  return 0;
}

double lr_at(Phase phase, std::size_t epoch_in_phase, std::size_t phase_len, const TrainConfig& cfg) {
  if (epoch_in_phase >= phase_len)
    throw ValidationError("epoch " + std::to_string(epoch_in_phase) + " outside phase of length " +
                          std::to_string(phase_len));
  const double base = phase == Phase::sl ? cfg.base_lr_sl : cfg.base_lr_ssl;
  return warmup_cosine(base, phase_warmup(phase, phase_len, cfg), epoch_in_phase, phase_len);
}

template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v, std::uint64_t step,
                  double lr, const AdamWHyper& hyper, bool decay) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size())
    throw DimensionError("adamw: parameter, gradient and moment sizes differ");
  const T b1 = static_cast<T>(hyper.beta1), b2 = static_cast<T>(hyper.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(hyper.beta1, static_cast<double>(step)));
  const T c2 = static_cast<T>(1.0 - std::pow(hyper.beta2, static_cast<double>(step)));
  const T shrink = static_cast<T>(decay ? 1.0 - lr * hyper.weight_decay : 1.0);
  const T step_size = static_cast<T>(lr), eps = static_cast<T>(hyper.eps);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i];
    m[i] = b1 * m[i] + (T(1) - b1) * g;
    v[i] = b2 * v[i] + (T(1) - b2) * g * g;
    const T m_hat = m[i] / c1, v_hat = v[i] / c2;
    param[i] = param[i] * shrink - step_size * m_hat / (std::sqrt(v_hat) + eps);
  }
}

template <typename T>
AdamW<T>::AdamW(const std::vector<NamedParameter<T>>& params, AdamWHyper hyper) : hyper_(hyper) {
  for (const auto& p : params) {
    m_.emplace_back(p.tensor.numel(), T(0));
    v_.emplace_back(p.tensor.numel(), T(0));
  }
  steps_.assign(params.size(), 0);
}

template <typename T>
void AdamW<T>::step(const std::vector<NamedParameter<T>>& params, double lr) {
  if (params.size() != m_.size()) throw DimensionError("optimizer built for a different parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    if (!p.tensor.has_grad()) continue;
    auto g = p.tensor.grad();
    for (T x : g)
      if (!std::isfinite(x)) throw TrainingAbort("non-finite gradient in parameter '" + p.name + "'", -1);
    auto t = p.tensor;
    adamw_update<T>(t.data(), g, m_[i], v_[i], ++steps_[i], lr, hyper_, p.decay);
  }
}

template <typename T>
void AdamW<T>::reset() {
  for (auto& m : m_) std::fill(m.begin(), m.end(), T(0));
  for (auto& v : v_) std::fill(v.begin(), v.end(), T(0));
  std::fill(steps_.begin(), steps_.end(), 0);
}

template void adamw_update<float>(std::span<float>, std::span<const float>, std::span<float>, std::span<float>,
                                  std::uint64_t, double, const AdamWHyper&, bool);
template void adamw_update<double>(std::span<double>, std::span<const double>, std::span<double>, std::span<double>,
                                   std::uint64_t, double, const AdamWHyper&, bool);
template class AdamW<float>;
template class AdamW<double>;

}  // namespace mixtrain
