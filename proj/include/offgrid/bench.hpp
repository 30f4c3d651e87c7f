#pragma once

#include "baselines.hpp"
#include "channel_sim.hpp"
#include "joint_uplink.hpp"
#include "offgrid_refine.hpp"
#include "sbl_core.hpp"
#include "types.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace offgrid {

enum class ArrayKind { ula, planar, file };

// One benchmark setup: array, carriers, channel statistics, estimator knobs
// and the Monte Carlo defaults. Serializes to/from a flat key=value file
// ('#' comments). An optional sweep axis reruns the trial set with one field
// overridden per sweep value.
struct Scenario {
  std::string name = "custom";

  ArrayKind array = ArrayKind::ula;
  std::string array_file;
  int n = 64;           // ULA element count
  int nx = 8, ny = 4;   // planar grid extent
  double f_down_mhz = 2170.0;
  double f_up_mhz = 1980.0;
  double f_ref_mhz = 2000.0;  // element spacing = half this carrier's wavelength

  int t = 32;
  double snr_db = 10.0;
  double snr_up_db = std::numeric_limits<double>::quiet_NaN();  // NaN: follow snr_db
  int grid_size = 90;
  int elevation_grid_size = 6;  // sbl2d lattice depth

  int n_clusters = 1;
  int n_subpaths = 1;
  double angular_spread_deg = 0.0;
  double azimuth_lo_deg = -90.0;
  double azimuth_hi_deg = 90.0;
  double elevation_lo_deg = 0.0;
  double elevation_hi_deg = 0.0;
  double gain_variance = 0.0;  // <= 0: 1/L

  int trials = 50;
  std::vector<std::string> methods = {"offgrid", "sbl", "odft", "dft"};

  StepMode step_mode = StepMode::fixed;
  int max_iters = 200;
  double evidence_tol = 1e-6;
  double rho = 0.95;
  PhiInit phi_init = PhiInit::random;
  double support_threshold = 1e-2;  // relative power cut for the LS-refit support
  double epsilon_scale = 1.0;  // multiplier on the default l1 residual ball
  int l1_max_inner = 1500;
  int uplink_snapshots = 1;

  std::string sweep = "none";  // none | t | snr | grid
  std::vector<double> sweep_values;

  double effective_snr_up_db() const { return std::isnan(snr_up_db) ? snr_db : snr_up_db; }

  Wavelength wavelength_down() const { return Wavelength::from_mhz(f_down_mhz); }
  Wavelength wavelength_up() const { return Wavelength::from_mhz(f_up_mhz); }
  double spacing() const { return Wavelength::from_mhz(f_ref_mhz).lambda / 2.0; }

  ArrayGeometry geometry() const {
    switch (array) {
      case ArrayKind::ula:
        return ArrayGeometry::ula(n, spacing());
      case ArrayKind::planar:
        return ArrayGeometry::planar_grid(nx, ny, spacing(), spacing());
      case ArrayKind::file:
        return ArrayGeometry::from_file(array_file);
    }
    throw std::logic_error("scenario: bad array kind");
  }

  ClusterChannelConfig channel_config() const {
    ClusterChannelConfig c;
    c.n_clusters = n_clusters;
    c.n_subpaths = n_subpaths;
    c.azimuth_lo = deg2rad(azimuth_lo_deg);
    c.azimuth_hi = deg2rad(azimuth_hi_deg);
    c.angular_spread = deg2rad(angular_spread_deg);
    c.elevation_lo = deg2rad(elevation_lo_deg);
    c.elevation_hi = deg2rad(elevation_hi_deg);
    c.two_dim = array != ArrayKind::ula;
    c.gain_variance = gain_variance;
    c.validate();
    return c;
  }

  RefineConfig refine_config() const {
    RefineConfig r;
    r.step_mode = step_mode;
    r.max_iters = max_iters;
    r.evidence_tol = evidence_tol;
    r.rho = rho;
    r.phi_init = phi_init;
    r.support_threshold = support_threshold;
    return r;
  }

  void validate() const {
    if (t < 1) throw std::invalid_argument("scenario: t must be >= 1");
    if (grid_size < 1) throw std::invalid_argument("scenario: grid_size must be >= 1");
    if (elevation_grid_size < 1)
      throw std::invalid_argument("scenario: elevation_grid_size must be >= 1");
    if (trials < 1) throw std::invalid_argument("scenario: trials must be >= 1");
    if (max_iters < 1) throw std::invalid_argument("scenario: max_iters must be >= 1");
    if (uplink_snapshots < 1) throw std::invalid_argument("scenario: uplink_snapshots must be >= 1");
    if (methods.empty()) throw std::invalid_argument("scenario: methods list is empty");
    if (array == ArrayKind::file && array_file.empty())
      throw std::invalid_argument("scenario: array=file needs array_file");
    if (sweep != "none" && sweep_values.empty())
      throw std::invalid_argument("scenario: sweep set but sweep_values empty");
    channel_config();
  }
};

inline const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> m = {"offgrid", "uplink_aided", "sbl",
                                             "sbl2d",   "odft",         "dft"};
  return m;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline double parse_double(const std::string& v, const std::string& ctx) {
  try {
    size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return x;
  } catch (const std::exception&) {
    throw std::runtime_error(ctx + ": invalid number '" + v + "'");
  }
}

inline int parse_int(const std::string& v, const std::string& ctx) {
  try {
    size_t pos = 0;
    const long x = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return static_cast<int>(x);
  } catch (const std::exception&) {
    throw std::runtime_error(ctx + ": invalid integer '" + v + "'");
  }
}

inline std::string format_g10(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

// Value as it survives the CSV round trip; summary statistics use this so
// they can be recomputed exactly from the emitted file.
inline double csv_round(double v) { return std::strtod(format_g10(v).c_str(), nullptr); }

}  // namespace detail

inline void apply_scenario_key(Scenario& sc, const std::string& key, const std::string& value,
                               const std::string& ctx) {
  using detail::parse_double;
  using detail::parse_int;
  if (key == "name") sc.name = value;
  else if (key == "array") {
    if (value == "ula") sc.array = ArrayKind::ula;
    else if (value == "planar") sc.array = ArrayKind::planar;
    else if (value == "file") sc.array = ArrayKind::file;
    else throw std::runtime_error(ctx + ": array must be ula, planar or file");
  } else if (key == "array_file") sc.array_file = value;
  else if (key == "n") sc.n = parse_int(value, ctx);
  else if (key == "nx") sc.nx = parse_int(value, ctx);
  else if (key == "ny") sc.ny = parse_int(value, ctx);
  else if (key == "f_down_mhz") sc.f_down_mhz = parse_double(value, ctx);
  else if (key == "f_up_mhz") sc.f_up_mhz = parse_double(value, ctx);
  else if (key == "f_ref_mhz") sc.f_ref_mhz = parse_double(value, ctx);
  else if (key == "t") sc.t = parse_int(value, ctx);
  else if (key == "snr_db") sc.snr_db = parse_double(value, ctx);
  else if (key == "snr_up_db") sc.snr_up_db = parse_double(value, ctx);
  else if (key == "grid_size") sc.grid_size = parse_int(value, ctx);
  else if (key == "elevation_grid_size") sc.elevation_grid_size = parse_int(value, ctx);
  else if (key == "n_clusters") sc.n_clusters = parse_int(value, ctx);
  else if (key == "n_subpaths") sc.n_subpaths = parse_int(value, ctx);
  else if (key == "angular_spread_deg") sc.angular_spread_deg = parse_double(value, ctx);
  else if (key == "azimuth_lo_deg") sc.azimuth_lo_deg = parse_double(value, ctx);
  else if (key == "azimuth_hi_deg") sc.azimuth_hi_deg = parse_double(value, ctx);
  else if (key == "elevation_lo_deg") sc.elevation_lo_deg = parse_double(value, ctx);
  else if (key == "elevation_hi_deg") sc.elevation_hi_deg = parse_double(value, ctx);
  else if (key == "gain_variance") sc.gain_variance = parse_double(value, ctx);
  else if (key == "trials") sc.trials = parse_int(value, ctx);
  else if (key == "methods") {
    sc.methods = detail::split_list(value);
    for (const auto& m : sc.methods)
      if (std::find(known_methods().begin(), known_methods().end(), m) == known_methods().end())
        throw std::runtime_error(ctx + ": unknown method '" + m + "'");
  } else if (key == "step_mode") {
    if (value == "fixed") sc.step_mode = StepMode::fixed;
    else if (value == "line_search") sc.step_mode = StepMode::line_search;
    else throw std::runtime_error(ctx + ": step_mode must be fixed or line_search");
  } else if (key == "max_iters") sc.max_iters = parse_int(value, ctx);
  else if (key == "evidence_tol") sc.evidence_tol = parse_double(value, ctx);
  else if (key == "rho") sc.rho = parse_double(value, ctx);
  else if (key == "phi_init") {
    if (value == "random") sc.phi_init = PhiInit::random;
    else if (value == "equispaced") sc.phi_init = PhiInit::equispaced;
    else if (value == "zero") sc.phi_init = PhiInit::zero;
    else throw std::runtime_error(ctx + ": phi_init must be random, equispaced or zero");
  } else if (key == "support_threshold") sc.support_threshold = parse_double(value, ctx);
  else if (key == "epsilon_scale") sc.epsilon_scale = parse_double(value, ctx);
  else if (key == "l1_max_inner") sc.l1_max_inner = parse_int(value, ctx);
  else if (key == "uplink_snapshots") sc.uplink_snapshots = parse_int(value, ctx);
  else if (key == "sweep") {
    if (value != "none" && value != "t" && value != "snr" && value != "grid")
      throw std::runtime_error(ctx + ": sweep must be none, t, snr or grid");
    sc.sweep = value;
  } else if (key == "sweep_values") {
    sc.sweep_values.clear();
    for (const auto& item : detail::split_list(value))
      sc.sweep_values.push_back(parse_double(item, ctx));
  } else {
    throw std::runtime_error(ctx + ": unknown scenario key '" + key + "'");
  }
}

inline Scenario parse_scenario_text(const std::string& text, const std::string& origin) {
  Scenario sc;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::string ctx = origin + ":" + std::to_string(lineno);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error(ctx + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw std::runtime_error(ctx + ": empty key");
    apply_scenario_key(sc, key, value, ctx);
  }
  sc.validate();
  return sc;
}

inline Scenario parse_scenario_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("scenario: cannot open '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_scenario_text(buf.str(), path);
}

inline std::string scenario_to_text(const Scenario& sc) {
  std::ostringstream out;
  const auto g = detail::format_g10;
  out << "name = " << sc.name << "\n";
  out << "array = "
      << (sc.array == ArrayKind::ula ? "ula" : sc.array == ArrayKind::planar ? "planar" : "file")
      << "\n";
  if (sc.array == ArrayKind::file) out << "array_file = " << sc.array_file << "\n";
  if (sc.array == ArrayKind::planar) out << "nx = " << sc.nx << "\nny = " << sc.ny << "\n";
  else out << "n = " << sc.n << "\n";
  out << "f_down_mhz = " << g(sc.f_down_mhz) << "\n";
  out << "f_up_mhz = " << g(sc.f_up_mhz) << "\n";
  out << "f_ref_mhz = " << g(sc.f_ref_mhz) << "\n";
  out << "t = " << sc.t << "\n";
  out << "snr_db = " << g(sc.snr_db) << "\n";
  if (!std::isnan(sc.snr_up_db)) out << "snr_up_db = " << g(sc.snr_up_db) << "\n";
  out << "grid_size = " << sc.grid_size << "\n";
  out << "elevation_grid_size = " << sc.elevation_grid_size << "\n";
  out << "n_clusters = " << sc.n_clusters << "\n";
  out << "n_subpaths = " << sc.n_subpaths << "\n";
  out << "angular_spread_deg = " << g(sc.angular_spread_deg) << "\n";
  out << "azimuth_lo_deg = " << g(sc.azimuth_lo_deg) << "\n";
  out << "azimuth_hi_deg = " << g(sc.azimuth_hi_deg) << "\n";
  out << "elevation_lo_deg = " << g(sc.elevation_lo_deg) << "\n";
  out << "elevation_hi_deg = " << g(sc.elevation_hi_deg) << "\n";
  out << "gain_variance = " << g(sc.gain_variance) << "\n";
  out << "trials = " << sc.trials << "\n";
  out << "methods = ";
  for (size_t i = 0; i < sc.methods.size(); ++i)
    out << (i ? "," : "") << sc.methods[i];
  out << "\n";
  out << "step_mode = " << (sc.step_mode == StepMode::fixed ? "fixed" : "line_search") << "\n";
  out << "max_iters = " << sc.max_iters << "\n";
  out << "evidence_tol = " << g(sc.evidence_tol) << "\n";
  out << "rho = " << g(sc.rho) << "\n";
  out << "phi_init = "
      << (sc.phi_init == PhiInit::random
              ? "random"
              : sc.phi_init == PhiInit::equispaced ? "equispaced" : "zero")
      << "\n";
  out << "support_threshold = " << g(sc.support_threshold) << "\n";
  out << "epsilon_scale = " << g(sc.epsilon_scale) << "\n";
  out << "l1_max_inner = " << sc.l1_max_inner << "\n";
  out << "uplink_snapshots = " << sc.uplink_snapshots << "\n";
  out << "sweep = " << sc.sweep << "\n";
  if (!sc.sweep_values.empty()) {
    out << "sweep_values = ";
    for (size_t i = 0; i < sc.sweep_values.size(); ++i)
      out << (i ? "," : "") << g(sc.sweep_values[i]);
    out << "\n";
  }
  return out.str();
}

inline std::vector<std::string> scenario_preset_names() {
  return {"ula_desk", "ula_pilot_sweep", "gridsweep_desk", "planar2d_desk", "ongrid_desk"};
}

inline Scenario scenario_preset(const std::string& name) {
  Scenario sc;
  sc.name = name;
  if (name == "ula_desk" || name == "ula_pilot_sweep") {
    sc.array = ArrayKind::ula;
    sc.n = 150;
    sc.t = 100;
    sc.snr_db = 10.0;
    sc.grid_size = 200;
    sc.n_clusters = 3;
    sc.n_subpaths = 10;
    sc.angular_spread_deg = 20.0;
    sc.azimuth_lo_deg = -40.0;
    sc.azimuth_hi_deg = 40.0;
    sc.trials = name == "ula_pilot_sweep" ? 200 : 50;
    sc.methods = {"offgrid", "uplink_aided", "sbl", "odft", "dft"};
    if (name == "ula_pilot_sweep") {
      sc.sweep = "t";
      sc.sweep_values = {30, 40, 50, 60, 70, 80, 90, 100};
    }
  } else if (name == "gridsweep_desk") {
    sc.array = ArrayKind::ula;
    sc.n = 150;
    sc.t = 70;
    sc.snr_db = 10.0;
    sc.grid_size = 200;
    sc.n_clusters = 3;
    sc.n_subpaths = 10;
    sc.angular_spread_deg = 20.0;
    sc.azimuth_lo_deg = -40.0;
    sc.azimuth_hi_deg = 40.0;
    sc.trials = 30;
    sc.methods = {"offgrid"};
    sc.sweep = "grid";
    sc.sweep_values = {150, 200, 250, 300};
  } else if (name == "planar2d_desk") {
    sc.array = ArrayKind::planar;
    sc.nx = 8;
    sc.ny = 4;
    sc.t = 24;
    sc.snr_db = 10.0;
    sc.grid_size = 72;
    sc.elevation_grid_size = 6;
    sc.n_clusters = 4;
    sc.n_subpaths = 1;
    sc.angular_spread_deg = 0.0;
    sc.azimuth_lo_deg = -180.0;
    sc.azimuth_hi_deg = 180.0;
    sc.elevation_lo_deg = 0.0;
    sc.elevation_hi_deg = 60.0;
    sc.trials = 50;
    sc.methods = {"offgrid", "sbl", "sbl2d", "odft", "dft"};
  } else if (name == "ongrid_desk") {
    sc.array = ArrayKind::ula;
    sc.n = 64;
    sc.t = 32;
    sc.snr_db = 30.0;
    sc.grid_size = 90;
    sc.n_clusters = 1;
    sc.n_subpaths = 1;
    sc.azimuth_lo_deg = -60.0;
    sc.azimuth_hi_deg = 60.0;
    sc.trials = 20;
    sc.methods = {"offgrid", "sbl"};
  } else {
    std::string names;
    for (const auto& p : scenario_preset_names()) names += (names.empty() ? "" : ", ") + p;
    throw std::runtime_error("unknown scenario preset '" + name + "' (available: " + names + ")");
  }
  sc.validate();
  return sc;
}

// Path first, preset name second.
inline Scenario load_scenario(const std::string& spec) {
  if (std::ifstream probe(spec); probe) return parse_scenario_file(spec);
  return scenario_preset(spec);
}

struct BenchRecord {
  std::string method;
  int n = 0;
  int t = 0;
  double snr_db = 0.0;
  int grid_size = 0;
  int trial = 0;
  std::uint64_t seed = 0;
  double nmse = 0.0;
  int iterations = 0;
  double runtime_ms = 0.0;
  std::string flags = "-";
};

inline const char* bench_csv_header() {
  return "method,N,T,snr_db,grid_size,trial,seed,nmse,iterations,runtime_ms,flags";
}

inline std::string bench_csv_row(const BenchRecord& r) {
  std::ostringstream out;
  out << r.method << ',' << r.n << ',' << r.t << ',' << detail::format_g10(r.snr_db) << ','
      << r.grid_size << ',' << r.trial << ',' << r.seed << ',' << detail::format_g10(r.nmse) << ','
      << r.iterations << ',' << detail::format_g10(r.runtime_ms) << ',' << r.flags;
  return out.str();
}

inline std::string bench_csv(const std::vector<BenchRecord>& records) {
  std::string out = bench_csv_header();
  out += '\n';
  for (const auto& r : records) {
    out += bench_csv_row(r);
    out += '\n';
  }
  return out;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

namespace detail {

// Azimuth x elevation lattice as a planar dictionary (elevation-major order).
// Grid-locked use only: azimuth values repeat across elevation layers, so the
// offset refinement invariant (ascending grid) does not apply.
inline OffGridDictionary azel_lattice(ArrayGeometry g, Wavelength w, int n_az, int n_el,
                                      double az_lo, double az_hi, double el_lo, double el_hi) {
  OffGridDictionary d(std::move(g), w);
  d.model = SteeringModel::planar;
  const int total = n_az * n_el;
  d.grid.resize(total);
  d.phi_fixed.resize(total);
  d.r_theta = (az_hi - az_lo) / n_az;
  for (int e = 0; e < n_el; ++e) {
    const double el =
        n_el == 1 ? 0.5 * (el_lo + el_hi) : el_lo + (e + 0.5) * (el_hi - el_lo) / n_el;
    for (int a = 0; a < n_az; ++a) {
      d.grid[e * n_az + a] = az_lo + (a + 0.5) * d.r_theta;
      d.phi_fixed[e * n_az + a] = el;
    }
  }
  return d;
}

// Read-only per-sweep-point state shared by all trials.
struct SweepContext {
  Scenario sc;  // sweep override applied
  ArrayGeometry geom;
  ArrayGeometry blind_geom;  // radial distances flattened to a line
  Wavelength wl_down{1.0};
  Wavelength wl_up{1.0};
  double noise_var = 0.0;
  double noise_var_up = 0.0;
  bool linear = true;
  double sweep_value = 0.0;
  int sweep_index = 0;
};

inline SweepContext make_sweep_context(const Scenario& base, int sweep_index) {
  SweepContext cx;
  cx.sc = base;
  cx.sweep_index = sweep_index;
  if (base.sweep != "none") {
    const double v = base.sweep_values.at(static_cast<size_t>(sweep_index));
    cx.sweep_value = v;
    if (base.sweep == "t") cx.sc.t = static_cast<int>(v);
    else if (base.sweep == "snr") cx.sc.snr_db = v;
    else if (base.sweep == "grid") cx.sc.grid_size = static_cast<int>(v);
    cx.sc.validate();
  }
  cx.geom = cx.sc.geometry();
  cx.blind_geom = cx.geom;
  std::fill(cx.blind_geom.phi.begin(), cx.blind_geom.phi.end(), 0.0);
  cx.wl_down = cx.sc.wavelength_down();
  cx.wl_up = cx.sc.wavelength_up();
  cx.noise_var = std::pow(10.0, -cx.sc.snr_db / 10.0);
  cx.noise_var_up = std::pow(10.0, -cx.sc.effective_snr_up_db() / 10.0);
  cx.linear = cx.sc.array == ArrayKind::ula;
  return cx;
}

struct TrialInput {
  ChannelRealization channel;
  PilotMatrix pilots;
  CVec y;
  CVec h_bar_ls;  // uplink LS estimate, filled only when requested
  std::uint64_t seed = 0;
};

inline TrialInput make_trial_input(const SweepContext& cx, std::uint64_t master, int trial,
                                   bool with_uplink) {
  TrialInput in;
  in.seed = derive_seed(master, static_cast<std::uint64_t>(cx.sweep_index),
                        static_cast<std::uint64_t>(trial));
  in.channel = generate_channel(cx.sc.channel_config(), cx.geom, cx.wl_down, derive_seed(in.seed, 0));
  in.pilots = generate_pilots(cx.sc.t, cx.geom.size(), 1.0, derive_seed(in.seed, 1));
  in.y = observe_downlink(in.pilots, in.channel.h, cx.noise_var, derive_seed(in.seed, 2));
  if (with_uplink) {
    const auto up = reciprocal_channel(in.channel, cx.geom, cx.wl_up, derive_seed(in.seed, 3));
    const CMat h_bar = up.h;
    const CMat s = CMat::Constant(1, cx.sc.uplink_snapshots, cplx(1.0, 0.0));
    const auto obs = observe_uplink(h_bar, s, cx.noise_var_up, derive_seed(in.seed, 4));
    in.h_bar_ls = ls_uplink_estimate(obs).col(0);
  }
  return in;
}

struct MethodOutcome {
  CVec h;
  int iterations = 0;
  std::string flags = "-";
  std::vector<TraceRow> trace;
};

inline std::string join_flags(bool stalled, bool max_iters, bool infeasible) {
  std::string f;
  if (stalled) f += "stalled";
  if (max_iters) f += (f.empty() ? "" : ";") + std::string("max_iters");
  if (infeasible) f += (f.empty() ? "" : ";") + std::string("infeasible");
  return f.empty() ? "-" : f;
}

inline MethodOutcome run_method(const SweepContext& cx, const std::string& method,
                                const TrialInput& in) {
  const Scenario& sc = cx.sc;
  MethodOutcome out;
  const Hyperpriors priors;
  const RefineConfig rcfg = sc.refine_config();
  L1Config l1;
  l1.epsilon = default_epsilon(sc.t, cx.noise_var) * sc.epsilon_scale;
  l1.max_inner = sc.l1_max_inner;

  auto take_sbl = [&](EstimateResult&& r) {
    out.h = std::move(r.h);
    out.iterations = r.iterations;
    out.flags = join_flags(r.stalled, r.hit_max_iters, false);
    out.trace = std::move(r.trace);
  };

  if (method == "offgrid") {
    if (cx.linear) {
      auto dict = OffGridDictionary::uniform_linear(cx.geom, cx.wl_down, sc.grid_size);
      take_sbl(estimate_offgrid_linear(in.y, in.pilots.X, dict, priors, rcfg));
    } else {
      auto dict = OffGridDictionary::uniform_azimuth(cx.geom, cx.wl_down, sc.grid_size);
      take_sbl(estimate_offgrid_2d(in.y, in.pilots.X, dict, priors, rcfg, derive_seed(in.seed, 5)));
    }
  } else if (method == "uplink_aided") {
    if (!cx.linear)
      throw std::runtime_error("method uplink_aided supports only ULA scenarios");
    auto dict = OffGridDictionary::uniform_linear(cx.geom, cx.wl_down, sc.grid_size);
    auto r = estimate_uplink_aided(in.y, in.pilots.X, in.h_bar_ls, dict, cx.wl_up, priors, rcfg);
    out.h = std::move(r.h);
    out.iterations = r.iterations;
    out.flags = join_flags(r.stalled, r.hit_max_iters, false);
    out.trace = std::move(r.trace);
  } else if (method == "sbl") {
    auto dict = OffGridDictionary::uniform_linear(cx.blind_geom, cx.wl_down, sc.grid_size);
    take_sbl(ongrid_sbl_estimate(in.y, in.pilots.X, dict, priors, rcfg));
  } else if (method == "sbl2d") {
    if (cx.linear) throw std::runtime_error("method sbl2d needs a planar scenario");
    auto dict = azel_lattice(cx.geom, cx.wl_down, sc.grid_size, sc.elevation_grid_size, -pi, pi,
                             deg2rad(sc.elevation_lo_deg), deg2rad(sc.elevation_hi_deg));
    take_sbl(ongrid_sbl_estimate(in.y, in.pilots.X, dict, priors, rcfg));
  } else if (method == "odft") {
    auto dict = OffGridDictionary::uniform_linear(cx.blind_geom, cx.wl_down, sc.grid_size);
    L1Result info;
    out.h = overcomplete_dft_estimate(in.y, in.pilots.X, dict, l1, sc.support_threshold, true, &info);
    out.iterations = info.iterations;
    out.flags = join_flags(false, false, !info.feasible);
  } else if (method == "dft") {
    L1Result info;
    out.h = dft_estimate(in.y, in.pilots.X, l1, &info);
    out.iterations = info.iterations;
    out.flags = join_flags(false, false, !info.feasible);
  } else {
    std::string names;
    for (const auto& m : known_methods()) names += (names.empty() ? "" : ", ") + m;
    throw std::runtime_error("unknown method '" + method + "' (available: " + names + ")");
  }
  return out;
}

}  // namespace detail

struct BenchOptions {
  std::vector<std::string> methods;  // empty: scenario default
  int trials = 0;                    // 0: scenario default
  std::uint64_t master_seed = 1;
  int threads = 1;                   // <= 0: hardware concurrency
  bool zero_timing = false;          // zero the runtime column (byte-stable output)
};

// Paired Monte Carlo run: every method inside a trial consumes the same
// channel, pilot and noise draws. Trials are distributed over a thread pool;
// records land in preassigned slots, so the output is identical for any
// thread count.
inline std::vector<BenchRecord> run_benchmark(const Scenario& scenario,
                                              const BenchOptions& opt = {}) {
  scenario.validate();
  Scenario base = scenario;
  if (!opt.methods.empty()) base.methods = opt.methods;
  if (opt.trials > 0) base.trials = opt.trials;
  for (const auto& m : base.methods)
    if (std::find(known_methods().begin(), known_methods().end(), m) == known_methods().end()) {
      std::string names;
      for (const auto& k : known_methods()) names += (names.empty() ? "" : ", ") + k;
      throw std::runtime_error("unknown method '" + m + "' (available: " + names + ")");
    }

  const int n_sweep = base.sweep == "none" ? 1 : static_cast<int>(base.sweep_values.size());
  std::vector<detail::SweepContext> contexts;
  contexts.reserve(static_cast<size_t>(n_sweep));
  for (int s = 0; s < n_sweep; ++s) contexts.push_back(detail::make_sweep_context(base, s));

  const bool with_uplink = std::find(base.methods.begin(), base.methods.end(), "uplink_aided") !=
                           base.methods.end();
  const int n_methods = static_cast<int>(base.methods.size());
  const int n_tasks = n_sweep * base.trials;
  std::vector<BenchRecord> records(static_cast<size_t>(n_tasks) * n_methods);

  std::atomic<int> next{0};
  std::mutex err_mutex;
  std::string first_error;

  auto worker = [&]() {
    try {
      for (int task = next.fetch_add(1); task < n_tasks; task = next.fetch_add(1)) {
        const int sweep_idx = task / base.trials;
        const int trial = task % base.trials;
        const auto& cx = contexts[static_cast<size_t>(sweep_idx)];
        const auto input = detail::make_trial_input(cx, opt.master_seed, trial, with_uplink);
        for (int m = 0; m < n_methods; ++m) {
          const auto start = std::chrono::steady_clock::now();
          auto outcome = detail::run_method(cx, base.methods[static_cast<size_t>(m)], input);
          const auto stop = std::chrono::steady_clock::now();
          BenchRecord rec;
          rec.method = base.methods[static_cast<size_t>(m)];
          rec.n = cx.geom.size();
          rec.t = cx.sc.t;
          rec.snr_db = cx.sc.snr_db;
          rec.grid_size = cx.sc.grid_size;
          rec.trial = trial;
          rec.seed = input.seed;
          rec.nmse = nmse(outcome.h, input.channel.h);
          rec.iterations = outcome.iterations;
          rec.runtime_ms =
              opt.zero_timing
                  ? 0.0
                  : std::chrono::duration<double, std::milli>(stop - start).count();
          rec.flags = std::move(outcome.flags);
          records[static_cast<size_t>(task) * n_methods + m] = std::move(rec);
        }
      }
    } catch (const std::exception& e) {
      std::lock_guard<std::mutex> lock(err_mutex);
      if (first_error.empty()) first_error = e.what();
      next.store(n_tasks);  // drain remaining work
    }
  };

  int n_threads = opt.threads;
  if (n_threads <= 0) n_threads = static_cast<int>(std::thread::hardware_concurrency());
  n_threads = std::max(1, std::min(n_threads, n_tasks));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(n_threads));
    for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (!first_error.empty()) throw std::runtime_error(first_error);

  // Slot layout is (sweep, trial, method); reorder to (sweep, method, trial).
  std::vector<BenchRecord> sorted;
  sorted.reserve(records.size());
  for (int s = 0; s < n_sweep; ++s)
    for (int m = 0; m < n_methods; ++m)
      for (int trial = 0; trial < base.trials; ++trial)
        sorted.push_back(std::move(
            records[(static_cast<size_t>(s) * base.trials + trial) * n_methods + m]));
  return sorted;
}

struct SummaryRow {
  int t = 0;
  double snr_db = 0.0;
  int grid_size = 0;
  std::string method;
  int trials = 0;
  double mean_nmse = 0.0;  // over CSV-rounded values
};

// Mean NMSE per (sweep point, method) in record order, computed from the
// values as they appear in the CSV so the table can be recomputed from the
// emitted file exactly.
inline std::vector<SummaryRow> summarize(const std::vector<BenchRecord>& records) {
  std::vector<SummaryRow> rows;
  for (const auto& r : records) {
    auto it = std::find_if(rows.begin(), rows.end(), [&](const SummaryRow& s) {
      return s.t == r.t && s.snr_db == r.snr_db && s.grid_size == r.grid_size &&
             s.method == r.method;
    });
    if (it == rows.end()) {
      rows.push_back({r.t, r.snr_db, r.grid_size, r.method, 0, 0.0});
      it = rows.end() - 1;
    }
    it->trials += 1;
    it->mean_nmse += detail::csv_round(r.nmse);
  }
  for (auto& s : rows) s.mean_nmse /= s.trials;
  return rows;
}

inline std::string summary_table(const std::vector<BenchRecord>& records) {
  std::ostringstream out;
  out << "T     snr_db  grid   method        trials  mean_nmse\n";
  for (const auto& s : summarize(records)) {
    char line[160];
    std::snprintf(line, sizeof(line), "%-5d %-7.4g %-6d %-13s %-7d %.10g\n", s.t, s.snr_db,
                  s.grid_size, s.method.c_str(), s.trials, s.mean_nmse);
    out << line;
  }
  return out.str();
}

struct SingleResult {
  double nmse = 0.0;
  int iterations = 0;
  double runtime_ms = 0.0;
  std::string flags = "-";
  std::vector<TraceRow> trace;
};

inline std::string trace_csv(const std::vector<TraceRow>& trace) {
  std::string out = "iteration,evidence,max_beta_step,active\n";
  for (const auto& row : trace) {
    out += std::to_string(row.iteration);
    out += ',';
    out += detail::format_g10(row.evidence);
    out += ',';
    out += detail::format_g10(row.max_beta_step);
    out += ',';
    out += std::to_string(row.active);
    out += '\n';
  }
  return out;
}

// One estimation run at the scenario base point with a full iteration trace.
inline SingleResult run_single(const Scenario& scenario, const std::string& method,
                               std::uint64_t seed) {
  scenario.validate();
  Scenario base = scenario;
  base.sweep = "none";
  base.sweep_values.clear();
  const auto cx = detail::make_sweep_context(base, 0);
  const auto input = detail::make_trial_input(cx, seed, 0, method == "uplink_aided");
  const auto start = std::chrono::steady_clock::now();
  auto outcome = detail::run_method(cx, method, input);
  const auto stop = std::chrono::steady_clock::now();
  SingleResult res;
  res.nmse = nmse(outcome.h, input.channel.h);
  res.iterations = outcome.iterations;
  res.runtime_ms = std::chrono::duration<double, std::milli>(stop - start).count();
  res.flags = std::move(outcome.flags);
  res.trace = std::move(outcome.trace);
  return res;
}

struct LeakageRow {
  int bin = 0;
  double theta_deg = 0.0;
  double value = 0.0;
};

// |v_n(theta)| over all N bins for each theta in a centered sweep; row count
// is N x sweep_count.
inline std::vector<LeakageRow> run_leakage(int count, double d_over_lambda, double theta_deg,
                                           int sweep_count = 1, double sweep_span_deg = 0.0) {
  if (count < 1) throw std::invalid_argument("run_leakage: N must be >= 1");
  if (sweep_count < 1) throw std::invalid_argument("run_leakage: sweep count must be >= 1");
  std::vector<LeakageRow> rows;
  rows.reserve(static_cast<size_t>(count) * sweep_count);
  for (int s = 0; s < sweep_count; ++s) {
    const double offset =
        sweep_count == 1 ? 0.0
                         : -0.5 * sweep_span_deg + s * sweep_span_deg / (sweep_count - 1);
    const double th = theta_deg + offset;
    for (int bin = 1; bin <= count; ++bin)
      rows.push_back({bin, th, leakage_coefficient(bin, deg2rad(th), count, d_over_lambda)});
  }
  return rows;
}

inline std::string leakage_csv(const std::vector<LeakageRow>& rows) {
  std::string out = "bin,theta_deg,coefficient\n";
  for (const auto& row : rows) {
    out += std::to_string(row.bin);
    out += ',';
    out += detail::format_g10(row.theta_deg);
    out += ',';
    out += detail::format_g10(row.value);
    out += '\n';
  }
  return out;
}

}  // namespace offgrid
