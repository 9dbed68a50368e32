#pragma once

// JSON (de)serialization of configuration structs. Keys match field names;
// missing keys keep their defaults and unknown keys are rejected.

#include <set>
#include <string>

#include "json.hpp"
#include "pacd/dataio.hpp"
#include "pacd/swin_crb.hpp"
#include "pacd/views.hpp"

namespace pacd {

using json = nlohmann::json;

namespace detail {

inline void reject_unknown(const json &j, const std::set<std::string> &known, const char *what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw ConfigError(std::string(what) + ": unknown key '" + it.key() + "'");
}

template <typename T> void read(const json &j, const char *key, T &out) {
  if (auto it = j.find(key); it != j.end()) {
    try {
      it->get_to(out);
    } catch (const json::exception &e) {
      throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
  }
}

} // namespace detail

inline void to_json(json &j, const IntRange &r) { j = json::array({r.lo, r.hi}); }
inline void from_json(const json &j, IntRange &r) {
  if (!j.is_array() || j.size() != 2) throw ConfigError("range must be [lo, hi]");
  r.lo = j[0].get<int>();
  r.hi = j[1].get<int>();
}
inline void to_json(json &j, const RealRange &r) { j = json::array({r.lo, r.hi}); }
inline void from_json(const json &j, RealRange &r) {
  if (!j.is_array() || j.size() != 2) throw ConfigError("range must be [lo, hi]");
  r.lo = j[0].get<double>();
  r.hi = j[1].get<double>();
}

inline void to_json(json &j, const SynthConfig &c) {
  j = {{"n_samples", c.n_samples},
       {"d_days", c.d_days},
       {"t_slots", c.t_slots},
       {"baseline_mean", c.baseline_mean},
       {"baseline_sd", c.baseline_sd},
       {"meal_count_per_day", c.meal_count_per_day},
       {"meal_amplitude", c.meal_amplitude},
       {"excursion_decay", c.excursion_decay},
       {"noise_sd", c.noise_sd},
       {"hypo_event_rate", c.hypo_event_rate},
       {"hypo_amplitude", c.hypo_amplitude},
       {"reversion_slots", c.reversion_slots},
       {"samples_per_subject", c.samples_per_subject},
       {"seed", c.seed}};
}

inline void from_json(const json &j, SynthConfig &c) {
  detail::reject_unknown(j,
                         {"n_samples", "d_days", "t_slots", "baseline_mean", "baseline_sd",
                          "meal_count_per_day", "meal_amplitude", "excursion_decay", "noise_sd",
                          "hypo_event_rate", "hypo_amplitude", "reversion_slots",
                          "samples_per_subject", "seed"},
                         "synth config");
  detail::read(j, "n_samples", c.n_samples);
  detail::read(j, "d_days", c.d_days);
  detail::read(j, "t_slots", c.t_slots);
  detail::read(j, "baseline_mean", c.baseline_mean);
  detail::read(j, "baseline_sd", c.baseline_sd);
  detail::read(j, "meal_count_per_day", c.meal_count_per_day);
  detail::read(j, "meal_amplitude", c.meal_amplitude);
  detail::read(j, "excursion_decay", c.excursion_decay);
  detail::read(j, "noise_sd", c.noise_sd);
  detail::read(j, "hypo_event_rate", c.hypo_event_rate);
  detail::read(j, "hypo_amplitude", c.hypo_amplitude);
  detail::read(j, "reversion_slots", c.reversion_slots);
  detail::read(j, "samples_per_subject", c.samples_per_subject);
  detail::read(j, "seed", c.seed);
}

inline void to_json(json &j, const Stride2 &s) { j = json::array({s.d, s.t}); }
inline void from_json(const json &j, Stride2 &s) {
  if (!j.is_array() || j.size() != 2) throw ConfigError("stride must be [d, t]");
  s.d = j[0].get<std::size_t>();
  s.t = j[1].get<std::size_t>();
}

inline void to_json(json &j, const BackboneConfig &c) {
  j = {{"embed_dim", c.embed_dim},
       {"depths", c.depths},
       {"num_heads", c.num_heads},
       {"window", c.window},
       {"mlp_ratio", c.mlp_ratio},
       {"patch_embed_strides", c.patch_embed_strides},
       {"p_drop", c.p_drop}};
}

inline void from_json(const json &j, BackboneConfig &c) {
  detail::reject_unknown(j,
                         {"embed_dim", "depths", "num_heads", "window", "mlp_ratio",
                          "patch_embed_strides", "p_drop"},
                         "backbone config");
  detail::read(j, "embed_dim", c.embed_dim);
  detail::read(j, "depths", c.depths);
  detail::read(j, "num_heads", c.num_heads);
  detail::read(j, "window", c.window);
  detail::read(j, "mlp_ratio", c.mlp_ratio);
  detail::read(j, "patch_embed_strides", c.patch_embed_strides);
  detail::read(j, "p_drop", c.p_drop);
}

inline void to_json(json &j, const ViewGenConfig &c) {
  j = {{"alpha_t", c.alpha_t},
       {"n_t", c.n_t},
       {"alpha_s", c.alpha_s},
       {"n_s", c.n_s},
       {"student_policy_mix", c.student_policy_mix},
       {"epsilon", c.epsilon},
       {"p_dim", c.p_dim}};
}

inline void from_json(const json &j, ViewGenConfig &c) {
  detail::reject_unknown(j, {"alpha_t", "n_t", "alpha_s", "n_s", "student_policy_mix", "epsilon", "p_dim"},
                         "view config");
  detail::read(j, "alpha_t", c.alpha_t);
  detail::read(j, "n_t", c.n_t);
  detail::read(j, "alpha_s", c.alpha_s);
  detail::read(j, "n_s", c.n_s);
  detail::read(j, "student_policy_mix", c.student_policy_mix);
  detail::read(j, "epsilon", c.epsilon);
  detail::read(j, "p_dim", c.p_dim);
}

} // namespace pacd
