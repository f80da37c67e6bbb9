#pragma once

#include <cstdint>

#include <json.hpp>

namespace treediff {

/// Work counters shared by samplers and the search. All monotone.
struct CallCounters {
  std::uint64_t latent_steps = 0;
  std::uint64_t refiner_calls = 0;
  std::uint64_t codec_calls = 0;
  std::uint64_t verifier_calls = 0;

  CallCounters& operator+=(const CallCounters& o) {
    latent_steps += o.latent_steps;
    refiner_calls += o.refiner_calls;
    codec_calls += o.codec_calls;
    verifier_calls += o.verifier_calls;
    return *this;
  }
  friend bool operator==(const CallCounters&, const CallCounters&) = default;
};

inline nlohmann::json to_json(const CallCounters& c) {
  return {{"latent_steps", c.latent_steps},
          {"refiner_calls", c.refiner_calls},
          {"codec_calls", c.codec_calls},
          {"verifier_calls", c.verifier_calls}};
}

}  // namespace treediff
