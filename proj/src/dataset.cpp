#include "astgl/dataset.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <optional>

#include <json.hpp>

#include "astgl/csv.hpp"
#include "astgl/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace astgl {

using nlohmann::json;

const SplitTensors& Dataset::split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "test") return test;
    throw DataError(concat("unknown split '", name, "'"));
}

std::vector<const CaseRecord*> Dataset::split_records(const std::string& name) const {
    std::vector<const CaseRecord*> out(split(name).cases(), nullptr);
    for (const CaseRecord& r : manifest.cases) {
        if (r.split == name) out[r.tensor_row] = &r;
    }
    return out;
}

namespace {

struct Candidate {
    CaseRecord record;
    Tensor window;
};

std::optional<Candidate> draw_candidate(const GridTopology& topology,
                                        const std::vector<TopologyScenario>& scenarios,
                                        const std::vector<std::size_t>& load_buses,
                                        const GenerationSpec& spec,
                                        const SurrogateConstants& constants,
                                        std::uint64_t attempt) {
    const std::uint64_t case_seed = substream_seed(spec.seed, "generation.case", attempt);
    Rng rng(case_seed);
    const TopologyScenario& scenario = scenarios[rng.below(scenarios.size())];

    FaultSpec fault;
    fault.fault_bus = rng.pick(load_buses);
    fault.load_level = rng.uniform(0.8, 1.2);
    fault.motor_fraction = rng.pick(std::vector<double>{0.6, 0.75, 0.9, 0.95});
    fault.dc_analogue = rng.uniform() < spec.dc_analogue_share;
    if (fault.dc_analogue) {
        // DC-side disturbances have no surrogate analogue; they appear as the
        // deepest, longest voltage dips and are flagged in the metadata.
        fault.depth = rng.uniform(0.05, 0.08);
        fault.duration = rng.pick(std::vector<double>{0.2, 0.3});
    } else {
        fault.depth = rng.uniform(0.05, 0.3);
        fault.duration = rng.pick(std::vector<double>{0.1, 0.2, 0.3});
    }

    for (int retry = 0; retry < 4; ++retry) {
        fault.validate(topology);
        SimResult sim = simulate_case(topology, scenario, fault, constants);
        if (sim.valid) {
            Candidate cand;
            cand.record.case_seed = case_seed;
            cand.record.group = scenario.group;
            cand.record.tripped = scenario.tripped;
            cand.record.fault = fault;
            cand.record.label = label_case(sim, topology);
            cand.window = window_case(sim, sim.fault_clear_time, spec.t_win, spec.dt_sample);
            return cand;
        }
        // Regenerate with perturbed severity.
        fault.depth = std::clamp(fault.depth * rng.uniform(0.95, 1.05), 0.05, 0.3);
        fault.load_level = std::clamp(fault.load_level * rng.uniform(0.97, 1.0), 0.8, 1.2);
    }
    return std::nullopt;
}

std::vector<char> serialize_split(const SplitTensors& split) {
    const std::size_t cases = split.cases();
    std::uint32_t header[3] = {0, 0, 0};
    if (cases > 0) {
        header[0] = static_cast<std::uint32_t>(cases);
        header[1] = static_cast<std::uint32_t>(split.x.extent(1));
        header[2] = static_cast<std::uint32_t>(split.x.extent(2) * split.x.extent(3));
    }
    std::vector<char> bytes(sizeof(header) + split.x.numel() * sizeof(double) + cases);
    std::memcpy(bytes.data(), header, sizeof(header));
    if (split.x.numel() > 0) {
        std::memcpy(bytes.data() + sizeof(header), split.x.data(),
                    split.x.numel() * sizeof(double));
    }
    std::memcpy(bytes.data() + sizeof(header) + split.x.numel() * sizeof(double),
                split.labels.data(), cases);
    return bytes;
}

std::uint64_t bytes_digest(std::uint64_t h, const std::vector<char>& bytes) {
    for (char c : bytes) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ULL;
    }
    return h;
}

SplitTensors deserialize_split(const std::vector<char>& bytes, std::size_t n_buses,
                               const std::string& what) {
    if (bytes.size() < 12) throw DataError(concat(what, ": truncated split file"));
    std::uint32_t header[3];
    std::memcpy(header, bytes.data(), sizeof(header));
    const std::size_t cases = header[0], rows = header[1], cols = header[2];
    SplitTensors split;
    if (cases == 0) return split;
    if (cols != n_buses * 3) {
        throw DataError(concat(what, ": expected ", n_buses * 3, " channels, found ", cols));
    }
    const std::size_t payload = cases * rows * cols * sizeof(double);
    if (bytes.size() != 12 + payload + cases) {
        throw DataError(concat(what, ": size mismatch (", bytes.size(), " bytes for ", cases,
                               " cases of ", rows, "x", cols, ")"));
    }
    split.x = Tensor({cases, rows, n_buses, 3});
    std::memcpy(split.x.data(), bytes.data() + 12, payload);
    split.labels.resize(cases);
    std::memcpy(split.labels.data(), bytes.data() + 12 + payload, cases);
    split.x.check_finite("dataset payload");
    return split;
}

std::vector<char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(concat("cannot read ", path.string()));
    return std::vector<char>((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, const std::vector<char>& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(concat("cannot write ", path.string()));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

json constants_to_json(const SurrogateConstants& c) {
    return json{{"inertia", c.inertia},
                {"slip_critical", c.slip_critical},
                {"torque_gain", c.torque_gain},
                {"mech_torque", c.mech_torque},
                {"reactive_gain", c.reactive_gain},
                {"grounding_eps", c.grounding_eps},
                {"dt", c.dt},
                {"horizon", c.horizon},
                {"slip_blowup", c.slip_blowup},
                {"v_ceiling", c.v_ceiling}};
}

SurrogateConstants constants_from_json(const json& j) {
    SurrogateConstants c;
    c.inertia = j.at("inertia").get<double>();
    c.slip_critical = j.at("slip_critical").get<double>();
    c.torque_gain = j.at("torque_gain").get<double>();
    c.mech_torque = j.at("mech_torque").get<double>();
    c.reactive_gain = j.at("reactive_gain").get<double>();
    c.grounding_eps = j.at("grounding_eps").get<double>();
    c.dt = j.at("dt").get<double>();
    c.horizon = j.at("horizon").get<double>();
    c.slip_blowup = j.at("slip_blowup").get<double>();
    c.v_ceiling = j.at("v_ceiling").get<double>();
    return c;
}

}  // namespace

Dataset generate_dataset(const GridTopology& topology, const GenerationSpec& spec,
                         const SurrogateConstants& constants) {
    if (spec.train_per_label + spec.test_per_label == 0) {
        throw ConfigError("generate_dataset: case counts must be >= 1");
    }
    std::vector<TopologyScenario> scenarios;
    for (const TopologyScenario& sc : enumerate_scenarios(topology, spec.group, 2)) {
        const std::size_t weight = sc.tripped.size() == 2 ? std::max<std::size_t>(1, spec.n2_weight) : 1;
        for (std::size_t i = 0; i < weight; ++i) scenarios.push_back(sc);
    }
    if (scenarios.empty()) throw DataError("generate_dataset: no usable scenarios");
    const std::vector<std::size_t> load_buses = topology.buses_of_kind(BusKind::load);
    if (load_buses.empty()) throw DataError("generate_dataset: grid has no load buses");

    // need[split][label]
    std::size_t need[2][2] = {{spec.train_per_label, spec.train_per_label},
                              {spec.test_per_label, spec.test_per_label}};
    const std::size_t total_target = 2 * (spec.train_per_label + spec.test_per_label);
    const std::uint64_t max_attempts =
        static_cast<std::uint64_t>(total_target) * spec.attempt_budget_factor;

    std::vector<Candidate> accepted;
    std::map<std::string, std::size_t> strata;  // (label, scenario) -> count
    accepted.reserve(total_target);

    const std::size_t batch = 64;
    std::uint64_t next_attempt = 0;
    auto outstanding = [&] {
        return need[0][0] + need[0][1] + need[1][0] + need[1][1];
    };
    while (outstanding() > 0) {
        if (next_attempt >= max_attempts) {
            const char* starved = (need[0][1] + need[1][1]) > 0 ? "unstable" : "stable";
            throw DataError(concat("generate_dataset: label balance unreachable, '", starved,
                                   "' still short after ", next_attempt, " attempts"));
        }
        const std::size_t count =
            static_cast<std::size_t>(std::min<std::uint64_t>(batch, max_attempts - next_attempt));
        std::vector<std::optional<Candidate>> batch_out(count);
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
        for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(count); ++i) {
            batch_out[static_cast<std::size_t>(i)] =
                draw_candidate(topology, scenarios, load_buses, spec, constants,
                               next_attempt + static_cast<std::uint64_t>(i));
        }
        for (std::size_t i = 0; i < count && outstanding() > 0; ++i) {
            if (!batch_out[i].has_value()) continue;
            Candidate cand = std::move(*batch_out[i]);
            const int label = cand.record.label;
            TopologyScenario sc{cand.record.group, cand.record.tripped};
            const std::string stratum = concat(label, "|", sc.key());
            const std::size_t seen = strata[stratum];
            // Every fifth case of a stratum prefers the test split (80/20).
            const int prefer = (spec.train_per_label == 0 || seen % 5 == 4) ? 1 : 0;
            int chosen = -1;
            if (need[prefer][label] > 0) {
                chosen = prefer;
            } else if (need[1 - prefer][label] > 0) {
                chosen = 1 - prefer;
            }
            if (chosen < 0) continue;  // this label is fully served
            strata[stratum] = seen + 1;
            --need[chosen][label];
            cand.record.split = chosen == 0 ? "train" : "test";
            accepted.push_back(std::move(cand));
        }
        next_attempt += count;
    }

    // Single writer: order by case seed, independent of generation order.
    std::sort(accepted.begin(), accepted.end(), [](const Candidate& a, const Candidate& b) {
        return a.record.case_seed < b.record.case_seed;
    });

    Dataset ds;
    ds.manifest.group = scenario_group_name(spec.group);
    ds.manifest.n_buses = topology.n_buses();
    ds.manifest.t_win = spec.t_win;
    ds.manifest.dt_sample = spec.dt_sample;
    ds.manifest.generator_seed = spec.seed;
    ds.manifest.grid_digest = grid_digest(topology);
    ds.manifest.constants = constants;

    const std::size_t window_rows = accepted.empty() ? 0 : accepted.front().window.extent(0);
    ds.manifest.window_len = window_rows;
    const std::size_t n = topology.n_buses();

    for (const std::string split_name : {"train", "test"}) {
        std::size_t rows = 0;
        for (const Candidate& c : accepted) {
            if (c.record.split == split_name) ++rows;
        }
        SplitTensors& split = split_name == std::string("train") ? ds.train : ds.test;
        if (rows == 0) continue;
        split.x = Tensor({rows, window_rows, n, 3});
        split.labels.reserve(rows);
    }

    std::size_t row_of_split[2] = {0, 0};
    for (Candidate& c : accepted) {
        const bool is_train = c.record.split == "train";
        SplitTensors& split = is_train ? ds.train : ds.test;
        const std::size_t row = row_of_split[is_train ? 0 : 1]++;
        c.record.tensor_row = row;
        std::memcpy(split.x.data() + row * c.window.numel(), c.window.data(),
                    c.window.numel() * sizeof(double));
        split.labels.push_back(static_cast<std::uint8_t>(c.record.label));

        ds.manifest.counts[c.record.split][static_cast<std::size_t>(c.record.label)]++;
        TopologyScenario sc{c.record.group, c.record.tripped};
        ds.manifest.scenario_composition[sc.key()]++;
        ds.manifest.cases.push_back(c.record);
    }

    std::uint64_t digest = 0xCBF29CE484222325ULL;
    digest = bytes_digest(digest, serialize_split(ds.train));
    digest = bytes_digest(digest, serialize_split(ds.test));
    ds.manifest.payload_digest = digest;
    return ds;
}

// ---------------------------------------------------------------------------
// manifest JSON

std::string manifest_to_json(const DatasetManifest& m) {
    json j;
    j["format_version"] = m.format_version;
    j["group"] = m.group;
    j["n_buses"] = m.n_buses;
    j["window_len"] = m.window_len;
    j["t_win"] = m.t_win;
    j["dt_sample"] = m.dt_sample;
    j["generator_seed"] = m.generator_seed;
    j["grid_digest"] = m.grid_digest;
    j["constants"] = constants_to_json(m.constants);
    j["payload_digest"] = m.payload_digest;
    json counts = json::object();
    for (const auto& [split, pair] : m.counts) {
        counts[split] = {{"stable", pair[0]}, {"unstable", pair[1]}};
    }
    j["counts"] = counts;
    j["scenario_composition"] = m.scenario_composition;
    json cases = json::array();
    for (const CaseRecord& c : m.cases) {
        cases.push_back(json{{"case_seed", c.case_seed},
                             {"group", scenario_group_name(c.group)},
                             {"tripped", c.tripped},
                             {"fault_bus", c.fault.fault_bus},
                             {"depth", c.fault.depth},
                             {"duration", c.fault.duration},
                             {"load_level", c.fault.load_level},
                             {"motor_fraction", c.fault.motor_fraction},
                             {"dc_analogue", c.fault.dc_analogue},
                             {"label", c.label},
                             {"split", c.split},
                             {"tensor_row", c.tensor_row}});
    }
    j["cases"] = cases;
    return j.dump(2);
}

DatasetManifest manifest_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw DataError(concat("manifest is not valid JSON: ", e.what()));
    }
    try {
        DatasetManifest m;
        m.format_version = j.at("format_version").get<std::string>();
        if (m.format_version != "ASTGL-DS v1") {
            throw DataError(concat("unsupported dataset format '", m.format_version, "'"));
        }
        m.group = j.at("group").get<std::string>();
        m.n_buses = j.at("n_buses").get<std::size_t>();
        m.window_len = j.at("window_len").get<std::size_t>();
        m.t_win = j.at("t_win").get<double>();
        m.dt_sample = j.at("dt_sample").get<double>();
        m.generator_seed = j.at("generator_seed").get<std::uint64_t>();
        m.grid_digest = j.at("grid_digest").get<std::uint64_t>();
        m.constants = constants_from_json(j.at("constants"));
        m.payload_digest = j.at("payload_digest").get<std::uint64_t>();
        for (const auto& [split, counts] : j.at("counts").items()) {
            m.counts[split] = {counts.at("stable").get<std::size_t>(),
                               counts.at("unstable").get<std::size_t>()};
        }
        m.scenario_composition =
            j.at("scenario_composition").get<std::map<std::string, std::size_t>>();
        for (const json& jc : j.at("cases")) {
            CaseRecord c;
            c.case_seed = jc.at("case_seed").get<std::uint64_t>();
            c.group = scenario_group_from(jc.at("group").get<std::string>());
            c.tripped = jc.at("tripped").get<std::vector<std::size_t>>();
            c.fault.fault_bus = jc.at("fault_bus").get<std::size_t>();
            c.fault.depth = jc.at("depth").get<double>();
            c.fault.duration = jc.at("duration").get<double>();
            c.fault.load_level = jc.at("load_level").get<double>();
            c.fault.motor_fraction = jc.at("motor_fraction").get<double>();
            c.fault.dc_analogue = jc.at("dc_analogue").get<bool>();
            c.label = jc.at("label").get<int>();
            c.split = jc.at("split").get<std::string>();
            c.tensor_row = jc.at("tensor_row").get<std::size_t>();
            m.cases.push_back(c);
        }
        return m;
    } catch (const json::exception& e) {
        throw DataError(concat("manifest is missing fields: ", e.what()));
    }
}

void save_dataset(const Dataset& dataset, const GridTopology& topology,
                  const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    save_topology(topology, dir / "topology.json");
    std::ofstream mf(dir / "manifest.json", std::ios::binary);
    if (!mf) throw DataError(concat("cannot write manifest in ", dir.string()));
    mf << manifest_to_json(dataset.manifest) << "\n";
    write_file(dir / "train.bin", serialize_split(dataset.train));
    write_file(dir / "test.bin", serialize_split(dataset.test));
}

Dataset load_dataset(const std::filesystem::path& dir) {
    Dataset ds;
    {
        std::ifstream mf(dir / "manifest.json", std::ios::binary);
        if (!mf) throw DataError(concat("no manifest.json in ", dir.string()));
        std::string text((std::istreambuf_iterator<char>(mf)), std::istreambuf_iterator<char>());
        ds.manifest = manifest_from_json(text);
    }
    const std::vector<char> train_bytes = read_file(dir / "train.bin");
    const std::vector<char> test_bytes = read_file(dir / "test.bin");
    ds.train = deserialize_split(train_bytes, ds.manifest.n_buses, "train.bin");
    ds.test = deserialize_split(test_bytes, ds.manifest.n_buses, "test.bin");

    std::uint64_t digest = 0xCBF29CE484222325ULL;
    digest = bytes_digest(digest, train_bytes);
    digest = bytes_digest(digest, test_bytes);
    if (digest != ds.manifest.payload_digest) {
        throw DataError(concat("dataset payload digest mismatch in ", dir.string()));
    }
    for (const std::string split : {"train", "test"}) {
        const auto it = ds.manifest.counts.find(split);
        const std::size_t declared =
            it == ds.manifest.counts.end() ? 0 : it->second[0] + it->second[1];
        if (declared != ds.split(split).cases()) {
            throw DataError(concat("manifest counts disagree with ", split, " payload"));
        }
    }
    return ds;
}

GridTopology dataset_topology(const std::filesystem::path& dir) {
    return load_topology(dir / "topology.json");
}

void export_dataset_csv(const Dataset& dataset, const std::filesystem::path& file) {
    CsvWriter csv(file);
    csv.cell(std::string("case_seed"))
        .cell(std::string("split"))
        .cell(std::string("group"))
        .cell(std::string("scenario"))
        .cell(std::string("label"))
        .cell(std::string("fault_bus"))
        .cell(std::string("depth"))
        .cell(std::string("duration"))
        .cell(std::string("load_level"))
        .cell(std::string("motor_fraction"))
        .cell(std::string("dc_analogue"));
    const std::size_t width =
        dataset.manifest.window_len * dataset.manifest.n_buses * 3;
    for (std::size_t i = 0; i < width; ++i) csv.cell(concat("x", i));
    csv.end_row();
    for (const CaseRecord& c : dataset.manifest.cases) {
        const SplitTensors& split = dataset.split(c.split);
        csv.cell(std::to_string(c.case_seed))
            .cell(c.split)
            .cell(scenario_group_name(c.group))
            .cell(TopologyScenario{c.group, c.tripped}.key())
            .cell(c.label)
            .cell(c.fault.fault_bus)
            .cell(c.fault.depth)
            .cell(c.fault.duration)
            .cell(c.fault.load_level)
            .cell(c.fault.motor_fraction)
            .cell(c.fault.dc_analogue ? 1 : 0);
        const double* row = split.x.data() + c.tensor_row * width;
        for (std::size_t i = 0; i < width; ++i) csv.cell(row[i]);
        csv.end_row();
    }
}

std::uint64_t file_digest(const std::filesystem::path& path) {
    return bytes_digest(0xCBF29CE484222325ULL, read_file(path));
}

}  // namespace astgl
