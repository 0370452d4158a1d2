#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "capnet/harness.hpp"

namespace capnet {

const char* to_string(ScenarioKind kind) {
  switch (kind) {
    case ScenarioKind::baseline_dual: return "baseline_dual";
    case ScenarioKind::baseline_single: return "baseline_single";
    case ScenarioKind::s1: return "s1";
    case ScenarioKind::s2_uncontended: return "s2_uncontended";
    case ScenarioKind::s2_contended: return "s2_contended";
    case ScenarioKind::fault_demo: return "fault_demo";
  }
  return "unknown";
}

std::optional<ScenarioKind> scenario_from_string(const std::string& name) {
  if (name == "baseline_dual") return ScenarioKind::baseline_dual;
  if (name == "baseline_single") return ScenarioKind::baseline_single;
  if (name == "s1") return ScenarioKind::s1;
  if (name == "s2_uncontended") return ScenarioKind::s2_uncontended;
  if (name == "s2_contended") return ScenarioKind::s2_contended;
  if (name == "fault_demo") return ScenarioKind::fault_demo;
  return std::nullopt;
}

uint64_t ScenarioConfig::effective_iterations() const {
  return profile == Profile::full ? bench.iterations * 10 : bench.iterations;
}

void ScenarioConfig::validate() const {
  uint64_t arena_bytes = arena_mib << 20;
  uint64_t comp_bytes = compartment_mib << 20;
  if (granule < Arena::kCapRecordSize) {
    throw std::runtime_error("config: granule must be at least 32 bytes");
  }
  int compartments = 2;
  switch (scenario) {
    case ScenarioKind::baseline_dual:
    case ScenarioKind::baseline_single:
    case ScenarioKind::s1: compartments = 2; break;
    case ScenarioKind::s2_uncontended: compartments = 3; break;
    case ScenarioKind::s2_contended:
    case ScenarioKind::fault_demo: compartments = 4; break;
  }
  if (comp_bytes * compartments + (1 << 20) > arena_bytes) {
    std::ostringstream os;
    os << "config: arena too small: " << to_string(scenario) << " needs "
       << compartments << " compartments of " << compartment_mib
       << " MiB plus 1 MiB of shared regions, but arena_mib = " << arena_mib;
    throw std::runtime_error(os.str());
  }
  // Rings, staging and benchmark buffers scale with the faster of the two
  // wire rates; the compartment region must hold them.
  double lat_rate = bench.latency_leg_rate_mbps > 0
                        ? bench.latency_leg_rate_mbps
                        : wire.rate_mbps;
  double top_rate = std::max(wire.rate_mbps, lat_rate);
  uint64_t elastic = static_cast<uint64_t>(top_rate * 1e6 / 8.0 * 0.060);
  uint64_t ring_capacity = 1024;
  while (ring_capacity < elastic / 1500 + 1 && ring_capacity < 16384) {
    ring_capacity *= 2;
  }
  uint64_t need = 2ull * ring_capacity * 1500 + 64ull * 1500 + (1ull << 20);
  if (need > comp_bytes) {
    std::ostringstream os;
    os << "config: compartment_mib too small for the configured rates: "
       << "rings sized for " << top_rate << " Mbit/s need about "
       << (need >> 20) + 1 << " MiB per compartment";
    throw std::runtime_error(os.str());
  }
  if (wire.rate_mbps <= 0) {
    throw std::runtime_error("config: wire rate_mbps must be positive");
  }
  if (wire.loss < 0 || wire.loss >= 1.0) {
    throw std::runtime_error("config: wire loss must be in [0, 1)");
  }
  if (wire.kind != "inproc" && wire.kind != "datagram") {
    throw std::runtime_error("config: wire kind must be inproc or datagram");
  }
  if (bench.payload_bytes == 0 || bench.payload_bytes > 200 * 1024) {
    throw std::runtime_error("config: payload must be in (0, 200 KiB]");
  }
  if (bench.chunk_bytes == 0 || bench.chunk_bytes > 200 * 1024) {
    throw std::runtime_error("config: chunk must be in (0, 200 KiB]");
  }
  if (bench.transfer_mib == 0) {
    throw std::runtime_error("config: transfer_mib must be positive");
  }
  if (bench.iterations == 0) {
    throw std::runtime_error("config: iterations must be positive");
  }
}

namespace {

struct Parser {
  std::string origin;
  int line_no = 0;

  [[noreturn]] void fail(const std::string& msg) const {
    std::ostringstream os;
    os << origin << ":" << line_no << ": " << msg;
    throw std::runtime_error(os.str());
  }

  double number(const std::string& value, const std::string& key) const {
    try {
      size_t used = 0;
      double v = std::stod(value, &used);
      if (used != value.size()) fail("trailing characters in value for " + key);
      return v;
    } catch (const std::invalid_argument&) {
      fail("expected a number for " + key + ", got '" + value + "'");
    } catch (const std::out_of_range&) {
      fail("value out of range for " + key);
    }
  }

  bool boolean(const std::string& value, const std::string& key) const {
    if (value == "true" || value == "1" || value == "yes") return true;
    if (value == "false" || value == "0" || value == "no") return false;
    fail("expected a boolean for " + key + ", got '" + value + "'");
  }
};

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

ScenarioConfig parse_config_text(const std::string& text,
                                 const std::string& origin) {
  ScenarioConfig cfg;
  Parser p{origin};
  std::istringstream in(text);
  std::string raw;
  std::string section = "scenario";
  while (std::getline(in, raw)) {
    p.line_no++;
    std::string line = trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') p.fail("unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section != "scenario" && section != "wire" && section != "bench" &&
          section != "output" && section != "assert") {
        p.fail("unknown section [" + section + "]");
      }
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos) p.fail("expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) p.fail("empty key");

    if (section == "scenario") {
      if (key == "kind") {
        auto k = scenario_from_string(value);
        if (!k) p.fail("unknown scenario kind '" + value + "'");
        cfg.scenario = *k;
      } else if (key == "seed") {
        cfg.seed = static_cast<uint64_t>(p.number(value, key));
      } else if (key == "profile") {
        if (value == "ci") cfg.profile = Profile::ci;
        else if (value == "full") cfg.profile = Profile::full;
        else p.fail("profile must be ci or full");
      } else if (key == "arena_mib") {
        cfg.arena_mib = static_cast<uint64_t>(p.number(value, key));
      } else if (key == "granule") {
        cfg.granule = static_cast<uint32_t>(p.number(value, key));
      } else if (key == "compartment_mib") {
        cfg.compartment_mib = static_cast<uint64_t>(p.number(value, key));
      } else {
        p.fail("unknown key '" + key + "' in [scenario]");
      }
    } else if (section == "wire") {
      if (key == "rate_mbps") cfg.wire.rate_mbps = p.number(value, key);
      else if (key == "latency_us") {
        cfg.wire.latency_ns = static_cast<uint64_t>(p.number(value, key) * 1000);
      } else if (key == "loss") {
        cfg.wire.loss = p.number(value, key);
      } else if (key == "kind") {
        cfg.wire.kind = value;
      } else if (key == "datagram_host") {
        cfg.wire.datagram_host = value;
      } else if (key == "datagram_port_a") {
        cfg.wire.datagram_port_a = static_cast<uint16_t>(p.number(value, key));
      } else if (key == "datagram_port_b") {
        cfg.wire.datagram_port_b = static_cast<uint16_t>(p.number(value, key));
      } else {
        p.fail("unknown key '" + key + "' in [wire]");
      }
    } else if (section == "bench") {
      if (key == "transfer_mib") {
        cfg.bench.transfer_mib = static_cast<uint64_t>(p.number(value, key));
      } else if (key == "warmup_mib") {
        cfg.bench.warmup_mib = static_cast<uint64_t>(p.number(value, key));
      } else if (key == "chunk_kib") {
        cfg.bench.chunk_bytes =
            static_cast<size_t>(p.number(value, key)) * 1024;
      } else if (key == "iterations") {
        cfg.bench.iterations = static_cast<uint64_t>(p.number(value, key));
      } else if (key == "payload") {
        cfg.bench.payload_bytes = static_cast<size_t>(p.number(value, key));
      } else if (key == "gap_ns") {
        cfg.bench.gap_ns = static_cast<uint64_t>(p.number(value, key));
      } else if (key == "latency_leg_rate_mbps") {
        cfg.bench.latency_leg_rate_mbps = p.number(value, key);
      } else if (key == "leg_timeout_s") {
        cfg.bench.leg_timeout_s = static_cast<uint64_t>(p.number(value, key));
      } else {
        p.fail("unknown key '" + key + "' in [bench]");
      }
    } else if (section == "output") {
      if (key == "dir") cfg.out.dir = value;
      else if (key == "raw_dump") cfg.out.raw_dump = p.boolean(value, key);
      else if (key == "csv") cfg.out.write_csv = p.boolean(value, key);
      else if (key == "json") cfg.out.write_json = p.boolean(value, key);
      else p.fail("unknown key '" + key + "' in [output]");
    } else {  // assert
      cfg.asserts[key] = p.number(value, key);
    }
  }
  cfg.validate();
  return cfg;
}

ScenarioConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), path);
}

}  // namespace capnet
