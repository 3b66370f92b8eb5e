// Qualitative material descriptors and their mapping to physical parameters.
#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "simloop/core.hpp"

namespace simloop {

enum class Composition { rubber, wood, metal, plastic, plush, ceramic, foam };
enum class Bounce { high, medium, low };
enum class Roughness { smooth, medium, rough };

inline const std::map<std::string, Composition>& composition_names() {
  static const std::map<std::string, Composition> m = {
      {"rubber", Composition::rubber},   {"wood", Composition::wood},
      {"metal", Composition::metal},     {"plastic", Composition::plastic},
      {"plush", Composition::plush},     {"ceramic", Composition::ceramic},
      {"foam", Composition::foam}};
  return m;
}

inline Composition parse_composition(const std::string& s) {
  auto it = composition_names().find(s);
  if (it == composition_names().end())
    throw ValidationError("validation: unknown composition label '" + s + "'");
  return it->second;
}

inline std::string composition_name(Composition c) {
  for (const auto& [name, v] : composition_names())
    if (v == c) return name;
  return "?";
}

inline Bounce parse_bounce(const std::string& s) {
  if (s == "high") return Bounce::high;
  if (s == "medium") return Bounce::medium;
  if (s == "low") return Bounce::low;
  throw ValidationError("validation: unknown bounce label '" + s + "'");
}

inline Roughness parse_roughness(const std::string& s) {
  if (s == "smooth") return Roughness::smooth;
  if (s == "medium") return Roughness::medium;
  if (s == "rough") return Roughness::rough;
  throw ValidationError("validation: unknown roughness label '" + s + "'");
}

struct MaterialDescriptor {
  Composition composition;
  Bounce bounce;
  Roughness roughness;

  static MaterialDescriptor from_labels(const std::string& composition,
                                        const std::string& bounce,
                                        const std::string& roughness) {
    return {parse_composition(composition), parse_bounce(bounce),
            parse_roughness(roughness)};
  }
};

struct MaterialParams {
  double density = 0;   // kg/m^3
  double youngs = 0;    // Pa
  double poisson = 0;
  double friction = 0;
  double damping = 1.0;  // per-step velocity retention

  void validate() const {
    if (!(density > 0)) throw ValidationError("validation: density must be > 0");
    if (!(youngs > 0))
      throw ValidationError("validation: Young's modulus must be > 0");
    if (!(poisson >= 0 && poisson < 0.5))
      throw ValidationError("validation: Poisson ratio must be in [0, 0.5)");
    if (!(friction >= 0))
      throw ValidationError("validation: friction must be >= 0");
    if (!(damping > 0 && damping <= 1.0))
      throw ValidationError("validation: damping must be in (0, 1]");
  }
};

struct MaterialTable {
  struct Base {
    double density, youngs, poisson;
  };
  struct BounceMod {
    double e_scale, damping;
  };
  std::map<Composition, Base> base;
  std::map<Bounce, BounceMod> bounce;
  std::map<Roughness, double> friction;

  static MaterialTable builtin() {
    MaterialTable t;
    t.base = {{Composition::rubber, {1100, 1e6, 0.47}},
              {Composition::wood, {700, 1e9, 0.35}},
              {Composition::metal, {7800, 1e11, 0.30}},
              {Composition::plastic, {1000, 2e9, 0.35}},
              {Composition::plush, {150, 5e4, 0.30}},
              {Composition::ceramic, {2500, 7e10, 0.25}},
              {Composition::foam, {80, 1e5, 0.30}}};
    t.bounce = {{Bounce::high, {1.0, 1.0}},
                {Bounce::medium, {1.0, 0.999}},
                {Bounce::low, {0.5, 0.995}}};
    t.friction = {{Roughness::smooth, 0.1},
                  {Roughness::medium, 0.3},
                  {Roughness::rough, 0.6}};
    return t;
  }

  void validate() const {
    for (const auto& [name, c] : composition_names())
      if (!base.count(c))
        throw ValidationError("validation: material table missing composition '" +
                              name + "'");
    for (const auto& [c, b] : base) {
      MaterialParams probe{b.density, b.youngs, b.poisson, 0.0, 1.0};
      try {
        probe.validate();
      } catch (const ValidationError& e) {
        throw ValidationError(strfmt("validation: material table row (%s): %s",
                                     composition_name(c).c_str(), e.what()));
      }
    }
    for (Bounce b : {Bounce::high, Bounce::medium, Bounce::low})
      if (!bounce.count(b))
        throw ValidationError("validation: material table missing a bounce block");
    for (const auto& [b, mod] : bounce)
      if (!(mod.e_scale > 0) || !(mod.damping > 0 && mod.damping <= 1.0))
        throw ValidationError("validation: bad bounce modifier in material table");
    for (Roughness r : {Roughness::smooth, Roughness::medium, Roughness::rough})
      if (!friction.count(r))
        throw ValidationError(
            "validation: material table missing a roughness entry");
    for (const auto& [r, mu] : friction)
      if (!(mu >= 0))
        throw ValidationError("validation: negative friction in material table");
  }
};

inline MaterialParams map_descriptor(const MaterialDescriptor& d,
                                     const MaterialTable& table =
                                         MaterialTable::builtin()) {
  table.validate();
  const auto& b = table.base.at(d.composition);
  const auto& mod = table.bounce.at(d.bounce);
  MaterialParams p;
  p.density = b.density;
  p.youngs = b.youngs * mod.e_scale;
  p.poisson = b.poisson;
  p.damping = mod.damping;
  p.friction = table.friction.at(d.roughness);
  p.validate();
  return p;
}

inline MaterialTable material_table_from_json(const nlohmann::json& j) {
  MaterialTable t;
  int row = 0;
  for (const auto& e : j.at("compositions")) {
    ++row;
    Composition c = parse_composition(e.at("composition").get<std::string>());
    MaterialTable::Base b{e.at("density").get<double>(),
                          e.at("youngs").get<double>(),
                          e.at("poisson").get<double>()};
    MaterialParams probe{b.density, b.youngs, b.poisson, 0.0, 1.0};
    try {
      probe.validate();
    } catch (const ValidationError& err) {
      throw ValidationError(
          strfmt("validation: material table row %d: %s", row, err.what()));
    }
    t.base[c] = b;
  }
  for (const auto& [name, v] : j.at("bounce").items())
    t.bounce[parse_bounce(name)] = {v.at("e_scale").get<double>(),
                                    v.at("damping").get<double>()};
  for (const auto& [name, v] : j.at("roughness").items())
    t.friction[parse_roughness(name)] = v.get<double>();
  t.validate();
  return t;
}

inline nlohmann::json material_table_to_json(const MaterialTable& t) {
  nlohmann::json j;
  j["compositions"] = nlohmann::json::array();
  for (const auto& [c, b] : t.base)
    j["compositions"].push_back({{"composition", composition_name(c)},
                                 {"density", b.density},
                                 {"youngs", b.youngs},
                                 {"poisson", b.poisson}});
  auto bounce_name = [](Bounce b) {
    return b == Bounce::high ? "high" : b == Bounce::medium ? "medium" : "low";
  };
  auto rough_name = [](Roughness r) {
    return r == Roughness::smooth ? "smooth"
           : r == Roughness::medium ? "medium"
                                    : "rough";
  };
  for (const auto& [b, mod] : t.bounce)
    j["bounce"][bounce_name(b)] = {{"e_scale", mod.e_scale},
                                   {"damping", mod.damping}};
  for (const auto& [r, mu] : t.friction) j["roughness"][rough_name(r)] = mu;
  return j;
}

inline MaterialTable load_material_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open material table: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("validation: bad JSON in material table " +
                          path.string() + ": " + e.what());
  }
  return material_table_from_json(j);
}

inline void write_material_table(const std::filesystem::path& path,
                                 const MaterialTable& t) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << material_table_to_json(t).dump(2) << "\n";
}

}  // namespace simloop
