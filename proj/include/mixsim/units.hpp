#pragma once

#include <cctype>
#include <charconv>
#include <string>
#include <string_view>

#include "mixsim/errors.hpp"

// Everything inside the library is SI: m, s, veh/m, m/s, m^2, 1/s.
// Configuration files may carry other units; they are converted here.
namespace mixsim::units {

inline constexpr double kKmhToMs = 1000.0 / 3600.0;
inline constexpr double kVehPerKmToVehPerM = 1.0e-3;

constexpr double kmh(double v) { return v * kKmhToMs; }
constexpr double to_kmh(double v) { return v / kKmhToMs; }
constexpr double veh_per_km(double rho) { return rho * kVehPerKmToVehPerM; }
constexpr double to_veh_per_km(double rho) { return rho / kVehPerKmToVehPerM; }

enum class Dimension { kNone, kSpeed, kDensity, kLength, kArea, kTime, kRate };

inline const char* dimension_name(Dimension d) {
  switch (d) {
    case Dimension::kNone: return "dimensionless";
    case Dimension::kSpeed: return "speed";
    case Dimension::kDensity: return "density";
    case Dimension::kLength: return "length";
    case Dimension::kArea: return "area";
    case Dimension::kTime: return "time";
    case Dimension::kRate: return "rate";
  }
  return "?";
}

namespace detail {

struct UnitEntry {
  std::string_view name;
  Dimension dim;
  double factor;  // multiply to reach SI
};

inline constexpr UnitEntry kUnits[] = {
    {"m/s", Dimension::kSpeed, 1.0},
    {"km/h", Dimension::kSpeed, kKmhToMs},
    {"veh/m", Dimension::kDensity, 1.0},
    {"veh/km", Dimension::kDensity, kVehPerKmToVehPerM},
    {"m", Dimension::kLength, 1.0},
    {"km", Dimension::kLength, 1000.0},
    {"m^2", Dimension::kArea, 1.0},
    {"m2", Dimension::kArea, 1.0},
    {"s", Dimension::kTime, 1.0},
    {"min", Dimension::kTime, 60.0},
    {"h", Dimension::kTime, 3600.0},
    {"1/s", Dimension::kRate, 1.0},
    {"1/min", Dimension::kRate, 1.0 / 60.0},
    {"1/h", Dimension::kRate, 1.0 / 3600.0},
};

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

}  // namespace detail

/// Parses "<number> <unit>" (e.g. "80 km/h", "150 veh/km") into SI.
/// A bare number is taken to be SI already. `field` only feeds diagnostics.
inline double parse_quantity(std::string_view text, Dimension expected, std::string_view field) {
  auto s = detail::trim(text);
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc{}) {
    throw ConfigError(std::string(field) + ": cannot parse a number from \"" + std::string(text) + "\"");
  }
  auto unit = detail::trim(std::string_view(ptr, static_cast<std::size_t>(s.data() + s.size() - ptr)));
  if (unit.empty()) return value;
  for (const auto& u : detail::kUnits) {
    if (u.name == unit) {
      if (u.dim != expected) {
        throw ConfigError(std::string(field) + ": unit \"" + std::string(unit) + "\" is a " +
                          dimension_name(u.dim) + ", expected a " + dimension_name(expected));
      }
      return value * u.factor;
    }
  }
  throw ConfigError(std::string(field) + ": unknown unit \"" + std::string(unit) + "\"");
}

}  // namespace mixsim::units
