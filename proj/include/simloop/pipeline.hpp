// Staged pipeline from a scene bundle to guidance artifacts: ingest,
// estimate, init-domain, simulate, render, fuse-flow, build-target, plus
// on-demand loss evaluation, a manifest with per-stage output hashes, and
// artifact inspection.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "simloop/bundle.hpp"
#include "simloop/core.hpp"
#include "simloop/domain.hpp"
#include "simloop/dynamics.hpp"
#include "simloop/materials.hpp"
#include "simloop/mpm.hpp"
#include "simloop/render.hpp"
#include "simloop/ttco.hpp"

namespace simloop {

namespace fs = std::filesystem;
using nlohmann::json;

struct PipelineConfig {
  std::string bundle;
  std::string out;
  double C = 1.25;
  int n = 128;
  int ppc = 8;
  double cfl = 0.4;
  double dt_max = 0;        // 0 = pick automatically
  double key_dt = 0.2;      // seconds between velocity key frames
  int splat_radius = 0;     // 0 = derive from particle spacing
  int dilation = 3;
  int densify_k = 4;
  double densify_radius = 8.0;
  std::string material_table;  // empty = builtin table
  uint64_t seed = 1;
  int threads = 0;  // 0 = library default
  std::string sample_mode = "bilinear";
  double mu_bg = 0.5;
  Vec3 gravity = Vec3(0, -9.8, 0);
  double bg_voxel = 0;  // 0 = extent / 128
  int bg_min_neighbors = 4;
  double bg_radius = 0;  // 0 = 3 * voxel

  void validate() const {
    if (!(C >= 1)) throw ValidationError("validation: C >= 1 required");
    if (n < 8) throw ValidationError("validation: grid n must be >= 8");
    if (ppc < 1) throw ValidationError("validation: ppc must be >= 1");
    if (!(cfl > 0 && cfl <= 1))
      throw ValidationError("validation: cfl must be in (0, 1]");
    if (dt_max < 0) throw ValidationError("validation: dt_max must be >= 0");
    if (!(key_dt > 0))
      throw ValidationError("validation: key_dt must be > 0");
    if (splat_radius < 0)
      throw ValidationError("validation: splat_radius must be >= 0");
    if (dilation < 0)
      throw ValidationError("validation: dilation must be >= 0");
    if (densify_k < 1)
      throw ValidationError("validation: densify_k must be >= 1");
    if (!(densify_radius > 0))
      throw ValidationError("validation: densify_radius must be > 0");
    if (threads < 0)
      throw ValidationError("validation: threads must be >= 0");
    if (mu_bg < 0) throw ValidationError("validation: mu_bg must be >= 0");
    if (bg_voxel < 0 || bg_radius < 0 || bg_min_neighbors < 0)
      throw ValidationError("validation: background filter params must be >= 0");
    if (!finite(gravity))
      throw ValidationError("validation: gravity must be finite");
    sample_mode_from_string(sample_mode);
  }

  json to_json() const {
    return json{{"bundle", bundle},
                {"out", out},
                {"C", C},
                {"n", n},
                {"ppc", ppc},
                {"cfl", cfl},
                {"dt_max", dt_max},
                {"key_dt", key_dt},
                {"splat_radius", splat_radius},
                {"dilation", dilation},
                {"densify_k", densify_k},
                {"densify_radius", densify_radius},
                {"material_table", material_table},
                {"seed", seed},
                {"threads", threads},
                {"sample_mode", sample_mode},
                {"mu_bg", mu_bg},
                {"gravity", {gravity.x(), gravity.y(), gravity.z()}},
                {"bg_voxel", bg_voxel},
                {"bg_min_neighbors", bg_min_neighbors},
                {"bg_radius", bg_radius}};
  }

  static PipelineConfig from_json(const json& j) {
    PipelineConfig c;
    for (const auto& [key, val] : j.items()) {
      try {
        if (key == "bundle") c.bundle = val.get<std::string>();
        else if (key == "out") c.out = val.get<std::string>();
        else if (key == "C") c.C = val.get<double>();
        else if (key == "n") c.n = val.get<int>();
        else if (key == "ppc") c.ppc = val.get<int>();
        else if (key == "cfl") c.cfl = val.get<double>();
        else if (key == "dt_max") c.dt_max = val.get<double>();
        else if (key == "key_dt") c.key_dt = val.get<double>();
        else if (key == "splat_radius") c.splat_radius = val.get<int>();
        else if (key == "dilation") c.dilation = val.get<int>();
        else if (key == "densify_k") c.densify_k = val.get<int>();
        else if (key == "densify_radius") c.densify_radius = val.get<double>();
        else if (key == "material_table") c.material_table = val.get<std::string>();
        else if (key == "seed") c.seed = val.get<uint64_t>();
        else if (key == "threads") c.threads = val.get<int>();
        else if (key == "sample_mode") c.sample_mode = val.get<std::string>();
        else if (key == "mu_bg") c.mu_bg = val.get<double>();
        else if (key == "gravity") {
          auto g = val.get<std::vector<double>>();
          if (g.size() != 3)
            throw ValidationError("validation: gravity must have 3 entries");
          c.gravity = Vec3(g[0], g[1], g[2]);
        } else if (key == "bg_voxel") c.bg_voxel = val.get<double>();
        else if (key == "bg_min_neighbors") c.bg_min_neighbors = val.get<int>();
        else if (key == "bg_radius") c.bg_radius = val.get<double>();
        else
          throw ValidationError("validation: unknown config key '" + key + "'");
      } catch (const json::exception& e) {
        throw ValidationError(
            strfmt("validation: bad config value for '%s': %s", key.c_str(),
                   e.what()));
      }
    }
    return c;
  }

  static PipelineConfig from_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config: " + path.string());
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw ValidationError(strfmt("validation: bad config json %s: %s",
                                   path.string().c_str(), e.what()));
    }
    return from_json(j);
  }
};

// ---------------------------------------------------------------------------
// domain.json and init_states.json

inline json domain_to_json(const SimDomain& d) {
  std::vector<double> r(9), t(3), g(3);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r[i * 3 + j] = d.R(i, j);
  for (int i = 0; i < 3; ++i) t[i] = d.t[i];
  for (int i = 0; i < 3; ++i) g[i] = d.gravity_sim[i];
  return json{{"S", d.S}, {"R", r},   {"t", t},
              {"C", d.C}, {"n", d.n}, {"dx", d.dx},
              {"gravity_sim", g},     {"dt", d.dt}};
}

inline SimDomain domain_from_json(const json& j) {
  SimDomain d;
  try {
    d.S = j.at("S").get<double>();
    auto r = j.at("R").get<std::vector<double>>();
    auto t = j.at("t").get<std::vector<double>>();
    auto g = j.at("gravity_sim").get<std::vector<double>>();
    if (r.size() != 9 || t.size() != 3 || g.size() != 3)
      throw ValidationError("validation: bad domain matrix sizes");
    for (int i = 0; i < 3; ++i)
      for (int k = 0; k < 3; ++k) d.R(i, k) = r[i * 3 + k];
    d.t = Vec3(t[0], t[1], t[2]);
    d.gravity_sim = Vec3(g[0], g[1], g[2]);
    d.C = j.at("C").get<double>();
    d.n = j.at("n").get<int>();
    d.dx = j.at("dx").get<double>();
    d.dt = j.at("dt").get<double>();
  } catch (const json::exception& e) {
    throw ValidationError(strfmt("validation: bad domain json: %s", e.what()));
  }
  d.validate();
  return d;
}

inline SimDomain load_domain(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError(strfmt("validation: bad domain json %s: %s",
                                 path.string().c_str(), e.what()));
  }
  return domain_from_json(j);
}

inline json init_state_to_json(const ObjectInitState& s) {
  auto arr = [](const Vec3& v) {
    return std::vector<double>{v.x(), v.y(), v.z()};
  };
  return json{{"object_id", s.object_id},
              {"position", arr(s.position)},
              {"scale", s.scale},
              {"v", arr(s.v)},
              {"omega", arr(s.omega)},
              {"center", arr(s.center)},
              {"radius", s.radius},
              {"theta_deg", s.theta * 180.0 / M_PI},
              {"residual_px", s.residual_px}};
}

inline ObjectInitState init_state_from_json(const json& j) {
  ObjectInitState s;
  try {
    auto vec = [&](const char* key) {
      auto v = j.at(key).get<std::vector<double>>();
      if (v.size() != 3)
        throw ValidationError(strfmt("validation: %s must have 3 entries", key));
      return Vec3(v[0], v[1], v[2]);
    };
    s.object_id = j.at("object_id").get<int>();
    s.position = vec("position");
    s.scale = j.at("scale").get<double>();
    s.v = vec("v");
    s.omega = vec("omega");
    s.center = vec("center");
    s.radius = j.at("radius").get<double>();
    s.theta = j.at("theta_deg").get<double>() * M_PI / 180.0;
    s.residual_px = j.at("residual_px").get<double>();
  } catch (const json::exception& e) {
    throw ValidationError(
        strfmt("validation: bad init state json: %s", e.what()));
  }
  s.validate();
  return s;
}

inline std::vector<ObjectInitState> load_init_states(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError(strfmt("validation: bad init states json %s: %s",
                                 path.string().c_str(), e.what()));
  }
  if (!j.is_array())
    throw ValidationError("validation: init_states.json must be an array");
  std::vector<ObjectInitState> out;
  for (const auto& e : j) out.push_back(init_state_from_json(e));
  return out;
}

// ---------------------------------------------------------------------------
// Manifest

struct StageRecord {
  std::string stage;
  std::string inputs_hash;
  std::vector<std::string> outputs;
  std::map<std::string, std::string> output_hashes;
  double wall_ms = 0;
  std::vector<std::string> warnings;
};

struct Manifest {
  std::vector<StageRecord> stages;

  json to_json() const {
    json j;
    j["stages"] = json::array();
    for (const auto& s : stages) {
      json e{{"stage", s.stage},
             {"inputs_hash", s.inputs_hash},
             {"outputs", s.outputs},
             {"wall_ms", s.wall_ms},
             {"warnings", s.warnings}};
      e["output_hashes"] = json::object();
      for (const auto& [k, v] : s.output_hashes) e["output_hashes"][k] = v;
      j["stages"].push_back(e);
    }
    return j;
  }

  static Manifest from_json(const json& j) {
    Manifest m;
    for (const auto& e : j.at("stages")) {
      StageRecord s;
      s.stage = e.at("stage").get<std::string>();
      s.inputs_hash = e.value("inputs_hash", "");
      s.outputs = e.value("outputs", std::vector<std::string>{});
      s.wall_ms = e.value("wall_ms", 0.0);
      s.warnings = e.value("warnings", std::vector<std::string>{});
      if (e.contains("output_hashes"))
        for (const auto& [k, v] : e.at("output_hashes").items())
          s.output_hashes[k] = v.get<std::string>();
      m.stages.push_back(s);
    }
    return m;
  }

  void upsert(const StageRecord& rec) {
    for (auto& s : stages)
      if (s.stage == rec.stage) {
        s = rec;
        return;
      }
    stages.push_back(rec);
  }

  const StageRecord* find(const std::string& name) const {
    for (const auto& s : stages)
      if (s.stage == name) return &s;
    return nullptr;
  }
};

inline const std::vector<std::string>& pipeline_stage_names() {
  static const std::vector<std::string> names = {
      "ingest",   "estimate",  "init-domain", "simulate",
      "render",   "fuse-flow", "build-target"};
  return names;
}

// ---------------------------------------------------------------------------
// Runner

class PipelineRunner {
 public:
  explicit PipelineRunner(PipelineConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    if (cfg_.bundle.empty())
      throw ValidationError("validation: bundle path required");
    if (cfg_.out.empty())
      throw ValidationError("validation: output path required");
    bundle_dir_ = cfg_.bundle;
    out_ = cfg_.out;
    set_thread_count(cfg_.threads);
    fs::create_directories(out_);
    fs::path mpath = out_ / "manifest.json";
    if (fs::exists(mpath)) {
      std::ifstream in(mpath);
      json j;
      try {
        in >> j;
        manifest_ = Manifest::from_json(j);
      } catch (...) {
        manifest_ = Manifest{};
      }
    }
  }

  const PipelineConfig& config() const { return cfg_; }
  const Manifest& manifest() const { return manifest_; }
  const fs::path& out_dir() const { return out_; }

  StageRecord run_stage(const std::string& name) {
    auto body = stage_body(name);
    StageRecord rec;
    rec.stage = name;
    auto t0 = std::chrono::steady_clock::now();
    std::vector<fs::path> outputs;
    try {
      rec.inputs_hash = inputs_hash(name);
      (this->*body)(outputs, rec.warnings);
    } catch (const ValidationError& e) {
      throw ValidationError("stage " + name + ": " + e.what());
    } catch (const SimulationBlowup& e) {
      throw SimulationBlowup("stage " + name + ": " + e.what());
    } catch (const IoError& e) {
      throw IoError("stage " + name + ": " + e.what());
    } catch (const json::exception& e) {
      throw ValidationError("stage " + name + ": " + e.what());
    }
    auto t1 = std::chrono::steady_clock::now();
    rec.wall_ms =
        std::chrono::duration_cast<std::chrono::microseconds>(t1 - t0).count() /
        1000.0;
    for (const auto& p : outputs) {
      std::string rel = fs::relative(p, out_).generic_string();
      rec.outputs.push_back(rel);
      rec.output_hashes[rel] = hash_file_hex(p);
    }
    manifest_.upsert(rec);
    write_manifest();
    return rec;
  }

  Manifest run_all() {
    for (const auto& name : pipeline_stage_names()) run_stage(name);
    return manifest_;
  }

  // Scores a candidate video directory (bundle frames when empty) against the
  // built targets and writes loss_report.json.
  LossReport eval_loss_command(const fs::path& video_dir) {
    require_artifact("targets/0002.png", "build-target");
    const SceneBundle& b = bundle();
    std::vector<WarpTarget> targets;
    for (int t = 2; t <= b.num_frames; ++t)
      targets.push_back(read_warp_target(out_ / "targets", t));
    fs::path vdir = video_dir.empty() ? bundle_dir_ / "frames" : video_dir;
    std::vector<ImageF> candidate = load_video_frames(vdir, b.num_frames);
    LossReport rep = eval_loss(candidate, targets);
    write_loss_report(out_ / "loss_report.json", rep);
    return rep;
  }

 private:
  PipelineConfig cfg_;
  fs::path bundle_dir_, out_;
  std::optional<SceneBundle> bundle_;
  Manifest manifest_;

  const SceneBundle& bundle() {
    if (!bundle_) bundle_ = load_bundle(bundle_dir_);
    return *bundle_;
  }

  MaterialTable material_table() const {
    if (cfg_.material_table.empty()) return MaterialTable::builtin();
    return load_material_table(cfg_.material_table);
  }

  using StageBody = void (PipelineRunner::*)(std::vector<fs::path>&,
                                             std::vector<std::string>&);

  StageBody stage_body(const std::string& name) {
    if (name == "ingest") return &PipelineRunner::stage_ingest;
    if (name == "estimate") return &PipelineRunner::stage_estimate;
    if (name == "init-domain") return &PipelineRunner::stage_init_domain;
    if (name == "simulate") return &PipelineRunner::stage_simulate;
    if (name == "render") return &PipelineRunner::stage_render;
    if (name == "fuse-flow") return &PipelineRunner::stage_fuse_flow;
    if (name == "build-target") return &PipelineRunner::stage_build_target;
    throw ValidationError("validation: unknown stage '" + name + "'");
  }

  void require_artifact(const std::string& rel, const char* producer) {
    if (!fs::exists(out_ / rel))
      throw ValidationError(strfmt("missing required artifact %s (run %s first)",
                                   rel.c_str(), producer));
  }

  std::string inputs_hash(const std::string& stage) {
    std::string blob = stage + "\n" + cfg_.to_json().dump() + "\n";
    uint64_t h = fnv1a64(blob.data(), blob.size());
    auto mix_file = [&](const fs::path& p) {
      if (!fs::exists(p) || fs::is_directory(p)) return;
      std::string line =
          p.filename().string() + "=" + hash_file_hex(p) + "\n";
      h = fnv1a64(line.data(), line.size(), h);
    };
    mix_file(bundle_dir_ / "meta.json");
    static const std::map<std::string, std::vector<std::string>> deps = {
        {"ingest", {}},
        {"estimate", {}},
        {"init-domain", {"init_states.json", "background_points.ply"}},
        {"simulate",
         {"init_states.json", "domain.json", "background_points.ply"}},
        {"render", {"trajectory.bin", "domain.json"}},
        {"fuse-flow", {}},
        {"build-target", {}},
    };
    auto it = deps.find(stage);
    if (it != deps.end())
      for (const auto& rel : it->second) mix_file(out_ / rel);
    return strfmt("%016llx", (unsigned long long)h);
  }

  void write_manifest() {
    std::ofstream out(out_ / "manifest.json");
    if (!out) throw IoError("cannot write manifest.json");
    out << manifest_.to_json().dump(2) << "\n";
  }

  double bg_voxel_size(const BackgroundPointCloud& cloud) const {
    if (cfg_.bg_voxel > 0) return cfg_.bg_voxel;
    double extent = cloud.bounds().max_extent();
    return extent > 0 ? extent / 128.0 : 0.01;
  }

  // ---- stages ----

  void stage_ingest(std::vector<fs::path>& outputs,
                    std::vector<std::string>& warnings) {
    const SceneBundle& b = bundle();
    BackgroundPointCloud raw = build_background_points(b);
    double voxel = bg_voxel_size(raw);
    double radius = cfg_.bg_radius > 0 ? cfg_.bg_radius : 3.0 * voxel;
    BackgroundPointCloud filtered =
        filter_background_points(raw, voxel, cfg_.bg_min_neighbors, radius);
    if (filtered.points.empty())
      warnings.push_back("background cloud is empty after filtering");
    fs::path ply = out_ / "background_points.ply";
    write_ply_points(ply, filtered);
    json j{{"width", b.width},
           {"height", b.height},
           {"fps", b.fps},
           {"num_frames", b.num_frames},
           {"object_ids", b.object_ids},
           {"background_points_raw", raw.points.size()},
           {"background_points", filtered.points.size()},
           {"voxel_size", voxel},
           {"filter_radius", radius}};
    fs::path ij = out_ / "ingest.json";
    std::ofstream out(ij);
    if (!out) throw IoError("cannot write ingest.json");
    out << j.dump(2) << "\n";
    outputs = {ply, ij};
  }

  void stage_estimate(std::vector<fs::path>& outputs,
                      std::vector<std::string>& warnings) {
    const SceneBundle& b = bundle();
    json arr = json::array();
    for (int oid : b.object_ids) {
      ObjectInitState st = place_object(b, oid);
      int frame_b =
          std::min(b.num_frames, 1 + (int)std::lround(b.fps * cfg_.key_dt));
      if (frame_b < 2) frame_b = std::min(2, b.num_frames);
      if (frame_b > 1) {
        st.v = estimate_linear_velocity(b, oid, 1, frame_b);
      } else {
        warnings.push_back(
            strfmt("object %d: single-frame bundle, velocity set to zero", oid));
      }
      auto mit = b.matches.find(oid);
      if (mit != b.matches.end()) {
        RotationEstimate rot = estimate_rotation(mit->second);
        st.theta = rot.theta;
        st.residual_px = rot.residual_rms;
        st.omega = rotation_to_angular_velocity(
            rot.theta, mit->second.dt, b.camera(mit->second.frame_a));
        st.center = st.position;
      } else {
        warnings.push_back(
            strfmt("object %d: no feature matches, omega set to zero", oid));
        st.center = st.position;
      }
      arr.push_back(init_state_to_json(st));
    }
    fs::path p = out_ / "init_states.json";
    std::ofstream out(p);
    if (!out) throw IoError("cannot write init_states.json");
    out << arr.dump(2) << "\n";
    outputs = {p};
  }

  void stage_init_domain(std::vector<fs::path>& outputs,
                         std::vector<std::string>& warnings) {
    require_artifact("init_states.json", "estimate");
    require_artifact("background_points.ply", "ingest");
    const SceneBundle& b = bundle();
    std::vector<ObjectInitState> states =
        load_init_states(out_ / "init_states.json");
    double horizon = b.duration();
    if (horizon <= 0) horizon = 1.0 / b.fps;

    Box3 fg;
    for (const auto& st : states)
      fg = Box3::unite(fg, bound_motion(st, horizon, cfg_.gravity));
    BackgroundPointCloud bg = read_ply_points(out_ / "background_points.ply");
    Box3 bg_box = bg.bounds();

    SimDomain d = build_domain(fg, bg_box, cfg_.C, cfg_.n, cfg_.gravity);

    MaterialTable table = material_table();
    double wave_max = 0, v_max = 0;
    for (const auto& st : states) {
      auto lit = b.materials.find(st.object_id);
      if (lit == b.materials.end()) continue;
      MaterialParams pm = map_descriptor(
          MaterialDescriptor::from_labels(lit->second.composition,
                                          lit->second.bounce,
                                          lit->second.roughness),
          table);
      bool clamped = false;
      MaterialParams ps = rescale_material(pm, d.S, &clamped);
      if (clamped)
        warnings.push_back(strfmt(
            "object %d: rescaled Young's modulus clamped to %.3g",
            st.object_id, kYoungsSimCap));
      wave_max = std::max(wave_max, std::sqrt(ps.youngs / ps.density));
      v_max = std::max(v_max, d.to_sim_velocity(st.v).norm());
    }
    d.dt = wave_max > 0 ? cfg_.cfl * d.dx / (v_max + wave_max) : 0.0;
    if (cfg_.dt_max > 0 && d.dt > 0) d.dt = std::min(d.dt, cfg_.dt_max);

    fs::path p = out_ / "domain.json";
    std::ofstream out(p);
    if (!out) throw IoError("cannot write domain.json");
    out << domain_to_json(d).dump(2) << "\n";
    outputs = {p};
  }

  void stage_simulate(std::vector<fs::path>& outputs,
                      std::vector<std::string>& warnings) {
    require_artifact("init_states.json", "estimate");
    require_artifact("domain.json", "init-domain");
    require_artifact("background_points.ply", "ingest");
    const SceneBundle& b = bundle();
    SimDomain domain = load_domain(out_ / "domain.json");
    std::vector<ObjectInitState> states =
        load_init_states(out_ / "init_states.json");
    MaterialTable table = material_table();

    ParticleSet all;
    for (const auto& st : states) {
      auto lit = b.materials.find(st.object_id);
      if (lit == b.materials.end())
        throw ValidationError(
            strfmt("validation: no material labels for object %d",
                   st.object_id));
      MaterialParams pm = map_descriptor(
          MaterialDescriptor::from_labels(lit->second.composition,
                                          lit->second.bounce,
                                          lit->second.roughness),
          table);
      bool clamped = false;
      MaterialParams psim = rescale_material(pm, domain.S, &clamped);
      if (clamped)
        warnings.push_back(strfmt(
            "object %d: rescaled Young's modulus clamped to %.3g",
            st.object_id, kYoungsSimCap));
      ParticleSet ps =
          seed_particles(b.meshes.at(st.object_id), st, domain, psim,
                         cfg_.ppc, cfg_.seed + (uint64_t)st.object_id,
                         all.size());
      all.append(ps);
    }

    BackgroundPointCloud bg = read_ply_points(out_ / "background_points.ply");
    std::vector<Vec3> bg_sim;
    bg_sim.reserve(bg.points.size());
    for (const auto& p : bg.points) bg_sim.push_back(domain.to_sim(p));
    Vec3 cam_mean = Vec3::Zero();
    for (int t = 1; t <= b.num_frames; ++t)
      cam_mean += conjugate_camera(domain, b.camera(t)).center();
    cam_mean /= double(b.num_frames);
    Collider collider = build_collider(bg_sim, domain, cfg_.mu_bg, cam_mean);
    if (collider.empty())
      warnings.push_back("empty background cloud, simulating without collider");

    SimOptions opts;
    opts.cfl = cfg_.cfl;
    opts.dt_max = cfg_.dt_max;
    double duration = b.duration();
    if (duration <= 0)
      throw ValidationError("validation: bundle has fewer than 2 frames");
    SimTrajectory traj = simulate(all, collider, domain, duration, b.fps, opts);

    fs::path p = out_ / "trajectory.bin";
    write_trajectory(p, traj);
    outputs = {p};
  }

  void stage_render(std::vector<fs::path>& outputs,
                    std::vector<std::string>& warnings) {
    require_artifact("trajectory.bin", "simulate");
    require_artifact("domain.json", "init-domain");
    const SceneBundle& b = bundle();
    SimDomain domain = load_domain(out_ / "domain.json");
    SimTrajectory traj = read_trajectory(out_ / "trajectory.bin");
    int T = traj.num_frames();
    if (T != b.num_frames)
      warnings.push_back(strfmt(
          "trajectory has %d frames but bundle has %d, rendering %d", T,
          b.num_frames, std::min(T, b.num_frames)));
    T = std::min(T, b.num_frames);

    int radius = cfg_.splat_radius;
    if (radius <= 0) {
      CameraFrame cam1 = conjugate_camera(domain, b.camera(1));
      std::vector<double> depths;
      for (const auto& x : traj.snapshots[0].x) {
        Vec2 px;
        double dep;
        if (cam1.project(x, px, dep)) depths.push_back(dep);
      }
      double spacing =
          domain.dx / std::max(1, (int)std::lround(std::cbrt((double)cfg_.ppc)));
      radius = auto_splat_radius(cam1.fx, spacing, depths);
    }

    RenderResult r1, prev;
    for (int t = 1; t <= T; ++t) {
      CameraFrame cam = conjugate_camera(domain, b.camera(t));
      RenderResult rt =
          render_particles(traj.snapshots[t - 1], cam, radius, t);
      fs::path png = out_ / "render" / strfmt("%04d.png", t);
      fs::path mpng = out_ / "mask" / strfmt("%04d.png", t);
      fs::path draw = out_ / "depth" / strfmt("%04d.f32", t);
      write_png(png, rt.rgb);
      write_png(mpng, rt.mask);
      write_f32_raster(draw, rt.depth);
      outputs.push_back(png);
      outputs.push_back(mpng);
      outputs.push_back(draw);

      if (t == 1) {
        r1 = rt;
      } else {
        CorrespondenceSet cs =
            compute_correspondences(r1, rt, traj.snapshots[t - 1], t);
        fs::path cp = out_ / "corr" / strfmt("%04d.bin", t);
        write_correspondences(cp, cs);
        outputs.push_back(cp);

        std::vector<FlowSample> samples = sim_flow_samples(prev, rt);
        ImageU8 bin(prev.mask.width, prev.mask.height, 1);
        for (size_t i = 0; i < prev.mask.data.size(); ++i)
          bin.data[i] = prev.mask.data[i] ? 1 : 0;
        FlowField flow = densify_flow(samples, bin, cfg_.dilation);
        flow.frame_src = t - 1;
        flow.frame_dst = t;
        fs::path fp = out_ / "flow" / strfmt("%04d.flo", t - 1);
        write_flow(fp, flow);
        outputs.push_back(fp);
      }
      prev = std::move(rt);
    }
  }

  void stage_fuse_flow(std::vector<fs::path>& outputs,
                       std::vector<std::string>& warnings) {
    const SceneBundle& b = bundle();
    if (b.num_frames < 2) {
      warnings.push_back("single-frame bundle, no flow to fuse");
      return;
    }
    require_artifact("flow/0001.flo", "render");
    bool tmpl_warned = false;
    for (int t = 1; t < b.num_frames; ++t) {
      FlowField sim = read_flow(out_ / "flow" / strfmt("%04d.flo", t));
      ImageU8 mask = read_png(out_ / "mask" / strfmt("%04d.png", t));
      FlowField tmpl;
      fs::path tp = bundle_dir_ / "template_flow" / strfmt("%04d.flo", t);
      if (fs::exists(tp)) {
        tmpl = read_flow(tp);
        if (!tmpl.uv.same_shape(sim.uv))
          throw ValidationError(strfmt(
              "validation: template flow %04d resolution differs", t));
      } else {
        tmpl = FlowField(sim.uv.width, sim.uv.height);
        std::fill(tmpl.valid.data.begin(), tmpl.valid.data.end(), 1);
        if (!tmpl_warned) {
          warnings.push_back(
              "no template_flow/ in bundle, fusing against zero flow");
          tmpl_warned = true;
        }
      }
      FlowField fused = fuse_flow(sim, tmpl, mask, cfg_.dilation);
      fused.frame_src = t;
      fused.frame_dst = t + 1;
      fs::path fp = out_ / "fused_flow" / strfmt("%04d.flo", t);
      write_flow(fp, fused);
      outputs.push_back(fp);
    }
  }

  void stage_build_target(std::vector<fs::path>& outputs,
                          std::vector<std::string>& warnings) {
    const SceneBundle& b = bundle();
    if (b.num_frames < 2) {
      warnings.push_back("single-frame bundle, no targets to build");
      return;
    }
    require_artifact("corr/0002.bin", "render");
    ImageF frame1 = image_to_float(b.frame(1));
    SampleMode mode = sample_mode_from_string(cfg_.sample_mode);
    for (int t = 2; t <= b.num_frames; ++t) {
      CorrespondenceSet cs =
          read_correspondences(out_ / "corr" / strfmt("%04d.bin", t), t);
      RenderResult rt;
      rt.frame_index = t;
      rt.rgb = read_png(out_ / "render" / strfmt("%04d.png", t));
      rt.mask = read_png(out_ / "mask" / strfmt("%04d.png", t));
      DenseMap dm = densify_correspondences(cs, rt.mask, cfg_.densify_k,
                                            cfg_.densify_radius);
      WarpTarget wt = build_warp_target(frame1, dm, rt, mode);
      write_warp_target(out_ / "targets", wt);
      outputs.push_back(out_ / "targets" / strfmt("%04d.png", t));
      outputs.push_back(out_ / "targets" / strfmt("%04d.src.png", t));
    }
  }
};

// ---------------------------------------------------------------------------
// Artifact inspection

namespace detail {

inline std::string inspect_trajectory(const fs::path& path) {
  SimTrajectory traj = read_trajectory(path);
  std::ostringstream os;
  size_t n = traj.snapshots.empty() ? 0 : traj.snapshots[0].size();
  os << "trajectory: " << n << " particles, " << traj.num_frames()
     << " frames, fps " << traj.fps << "\n";
  if (!traj.snapshots.empty()) {
    Box3 bb;
    for (const auto& x : traj.snapshots.front().x) bb.extend(x);
    os << strfmt("  frame 1 bounds  [%.4f %.4f %.4f] .. [%.4f %.4f %.4f]\n",
                 bb.lo.x(), bb.lo.y(), bb.lo.z(), bb.hi.x(), bb.hi.y(),
                 bb.hi.z());
    Box3 be;
    double vsum = 0;
    for (size_t i = 0; i < traj.snapshots.back().size(); ++i) {
      be.extend(traj.snapshots.back().x[i]);
      vsum += traj.snapshots.back().v[i].norm();
    }
    os << strfmt("  frame %d bounds [%.4f %.4f %.4f] .. [%.4f %.4f %.4f]\n",
                 traj.num_frames(), be.lo.x(), be.lo.y(), be.lo.z(), be.hi.x(),
                 be.hi.y(), be.hi.z());
    os << strfmt("  mean speed at last frame %.5f\n", n ? vsum / n : 0.0);
  }
  return os.str();
}

inline std::string inspect_flow(const fs::path& path) {
  FlowField f = read_flow(path);
  size_t valid = 0;
  std::vector<double> mags;
  for (int y = 0; y < f.uv.height; ++y)
    for (int x = 0; x < f.uv.width; ++x)
      if (f.valid.at(x, y)) {
        valid++;
        mags.push_back(std::hypot(f.uv.at(x, y, 0), f.uv.at(x, y, 1)));
      }
  std::ostringstream os;
  os << "flow " << f.uv.width << "x" << f.uv.height << ": " << valid
     << " valid px";
  if (!mags.empty()) {
    std::sort(mags.begin(), mags.end());
    double mean = 0;
    for (double m : mags) mean += m;
    mean /= mags.size();
    os << strfmt(", |uv| mean %.4f max %.4f p50 %.4f p90 %.4f", mean,
                 mags.back(), mags[mags.size() / 2],
                 mags[(size_t)(mags.size() * 0.9)]);
  }
  os << "\n";
  return os.str();
}

inline std::string inspect_correspondences(const fs::path& path) {
  CorrespondenceSet cs = read_correspondences(path);
  size_t vis = 0;
  double sum = 0;
  for (const auto& e : cs.entries)
    if (e.visible_in_frame1) {
      vis++;
      sum += (e.qt - e.p1).norm();
    }
  std::ostringstream os;
  os << "correspondences: " << cs.entries.size() << " entries, " << vis
     << " visible in frame 1";
  if (vis) os << strfmt(", mean |qt-p1| %.3f px", sum / vis);
  os << "\n";
  return os.str();
}

inline std::string inspect_loss_report(const fs::path& path) {
  LossReport rep = read_loss_report(path);
  std::ostringstream os;
  os << "loss report: " << rep.frames.size() << " frames\n";
  os << "  t     l_tex        n_pixels  n_frame1  n_render\n";
  for (const auto& f : rep.frames)
    os << strfmt("  %-5d %-12.6g %-9lld %-9lld %-9lld\n", f.t, f.l_tex,
                 (long long)f.n_pixels, (long long)f.n_frame1,
                 (long long)f.n_render);
  os << strfmt("  l_ttco = %.8g\n", rep.l_ttco);
  return os.str();
}

inline std::string inspect_json_file(const fs::path& path) {
  std::string name = path.filename().string();
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError(strfmt("validation: bad json %s: %s",
                                 path.string().c_str(), e.what()));
  }
  std::ostringstream os;
  if (name == "domain.json") {
    SimDomain d = domain_from_json(j);
    os << strfmt(
        "domain: S %.6g, n %d, dx %.6g, C %.3g, gravity_sim [%.4g %.4g "
        "%.4g], dt %.4g\n",
        d.S, d.n, d.dx, d.C, d.gravity_sim.x(), d.gravity_sim.y(),
        d.gravity_sim.z(), d.dt);
  } else if (name == "init_states.json") {
    os << "init states: " << j.size() << " objects\n";
    for (const auto& e : j) {
      ObjectInitState s = init_state_from_json(e);
      os << strfmt(
          "  object %d: pos [%.3f %.3f %.3f], scale %.4g, radius %.3f, |v| "
          "%.3f, |omega| %.3f, theta %.2f deg\n",
          s.object_id, s.position.x(), s.position.y(), s.position.z(),
          s.scale, s.radius, s.v.norm(), s.omega.norm(),
          s.theta * 180.0 / M_PI);
    }
  } else if (name == "manifest.json") {
    Manifest m = Manifest::from_json(j);
    os << "manifest: " << m.stages.size() << " stages\n";
    for (const auto& s : m.stages) {
      os << strfmt("  %-13s %8.1f ms, %zu outputs", s.stage.c_str(),
                   s.wall_ms, s.outputs.size());
      if (!s.warnings.empty()) os << ", " << s.warnings.size() << " warnings";
      os << "\n";
    }
  } else if (name == "loss_report.json") {
    return inspect_loss_report(path);
  } else {
    os << name << ": " << j.dump(2) << "\n";
  }
  return os.str();
}

inline std::string inspect_ply(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  size_t verts = 0, faces = 0;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tok, what;
    size_t count;
    ls >> tok;
    if (tok == "element" && (ls >> what >> count)) {
      if (what == "vertex") verts = count;
      if (what == "face") faces = count;
    }
    if (tok == "end_header") break;
  }
  std::ostringstream os;
  if (faces > 0) {
    os << "mesh: " << verts << " vertices, " << faces << " faces\n";
  } else {
    BackgroundPointCloud cloud = read_ply_points(path);
    Box3 bb = cloud.bounds();
    os << "point cloud: " << cloud.points.size() << " points";
    if (!cloud.points.empty())
      os << strfmt(", bounds [%.3f %.3f %.3f] .. [%.3f %.3f %.3f]", bb.lo.x(),
                   bb.lo.y(), bb.lo.z(), bb.hi.x(), bb.hi.y(), bb.hi.z());
    os << "\n";
  }
  return os.str();
}

}  // namespace detail

inline std::string inspect_artifact(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("no such artifact: " + path.string());
  std::string name = path.filename().string();
  std::string ext = path.extension().string();
  if (name == "trajectory.bin") return detail::inspect_trajectory(path);
  if (ext == ".flo") return detail::inspect_flow(path);
  if (ext == ".bin") return detail::inspect_correspondences(path);
  if (ext == ".json") return detail::inspect_json_file(path);
  if (ext == ".ply") return detail::inspect_ply(path);
  if (ext == ".png") {
    ImageU8 img = read_png(path);
    return strfmt("png: %dx%d, %d channel%s\n", img.width, img.height,
                  img.channels, img.channels == 1 ? "" : "s");
  }
  if (ext == ".f32") {
    ImageF img = read_f32_raster(path);
    double mn = std::numeric_limits<double>::infinity(), mx = -mn, sum = 0;
    size_t finite_n = 0;
    for (float v : img.data)
      if (std::isfinite(v)) {
        mn = std::min(mn, (double)v);
        mx = std::max(mx, (double)v);
        sum += v;
        finite_n++;
      }
    std::ostringstream os;
    os << "f32 raster: " << img.width << "x" << img.height << ", " << finite_n
       << " finite px";
    if (finite_n)
      os << strfmt(", min %.4f max %.4f mean %.4f", mn, mx, sum / finite_n);
    os << "\n";
    return os.str();
  }
  throw ValidationError("validation: unknown artifact format: " +
                        path.string());
}

}  // namespace simloop
