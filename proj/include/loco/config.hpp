#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "loco/pvt.hpp"
#include "loco/synthdata.hpp"

namespace loco {

// INI-style run description. Sections: [model] picks the scale preset and
// overrides architecture fields, [ablation] gates the adapter sites, [run]
// holds the schedule, and one [task N] per dataset defines its recipe.
// Repeated keys append (used by `organ =` lines); everything else is
// single-valued and unknown keys are rejected rather than ignored.

struct RunConfig {
    PvtConfig model;
    uint64_t seed = 1;
    size_t epochs_base = 8;
    size_t epochs_task = 6;
    double lr = 1e-4;
    double weight_decay = 3e-5;
    std::string out_dir = "run";
    std::vector<SyntheticTaskRecipe> tasks;

    const SyntheticTaskRecipe& task(uint32_t id) const {
        for (const auto& t : tasks)
            if (t.task_id == id) return t;
        throw ConfigError("run config has no task " + std::to_string(id));
    }

    std::vector<std::string> task_classes(uint32_t id) const {
        std::vector<std::string> out;
        for (const auto& o : task(id).organs) out.push_back(o.class_name);
        return out;
    }
};

namespace detail {

struct IniEntry {
    std::string section;
    std::string key;
    std::string value;
    size_t line = 0;
};

inline std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<IniEntry> parse_ini(const std::string& text) {
    std::vector<IniEntry> entries;
    std::istringstream in(text);
    std::string line, section;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']') throw ConfigError("line " + std::to_string(lineno) +
                                                   ": unterminated section header");
            section = trim(t.substr(1, t.size() - 2));
            if (section.empty()) throw ConfigError("line " + std::to_string(lineno) +
                                                   ": empty section name");
            continue;
        }
        const size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        IniEntry e;
        e.section = section;
        e.key = trim(t.substr(0, eq));
        e.value = trim(t.substr(eq + 1));
        e.line = lineno;
        if (e.key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
        if (e.section.empty())
            throw ConfigError("line " + std::to_string(lineno) + ": key outside any section");
        entries.push_back(std::move(e));
    }
    return entries;
}

inline ConfigError bad_value(const IniEntry& e, const std::string& why) {
    return ConfigError("line " + std::to_string(e.line) + ": " + e.key + ": " + why);
}

inline double to_double(const IniEntry& e, const std::string& word) {
    try {
        size_t idx = 0;
        const double v = std::stod(word, &idx);
        if (idx != word.size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        throw bad_value(e, "not a number: '" + word + "'");
    }
}

inline uint64_t to_u64(const IniEntry& e, const std::string& word) {
    uint64_t v = 0;
    const auto [p, ec] = std::from_chars(word.data(), word.data() + word.size(), v);
    if (ec != std::errc() || p != word.data() + word.size())
        throw bad_value(e, "not a non-negative integer: '" + word + "'");
    return v;
}

inline std::vector<std::string> words(const std::string& s) {
    std::istringstream in(s);
    std::vector<std::string> out;
    std::string w;
    while (in >> w) out.push_back(w);
    return out;
}

template <typename T, size_t N>
std::array<T, N> fixed_list(const IniEntry& e, T (*conv)(const IniEntry&, const std::string&)) {
    const auto ws = words(e.value);
    if (ws.size() != N)
        throw bad_value(e, "expected " + std::to_string(N) + " values");
    std::array<T, N> out{};
    for (size_t i = 0; i < N; ++i) out[i] = conv(e, ws[i]);
    return out;
}

inline bool to_flag(const IniEntry& e) {
    if (e.value == "on" || e.value == "true" || e.value == "1") return true;
    if (e.value == "off" || e.value == "false" || e.value == "0") return false;
    throw bad_value(e, "expected on/off");
}

inline void apply_model_key(PvtConfig& m, const IniEntry& e) {
    const auto ws = words(e.value);
    auto usize = [&](const std::string& w) { return static_cast<size_t>(to_u64(e, w)); };
    if (e.key == "dims" || e.key == "heads" || e.key == "sr" || e.key == "enc_depths" ||
        e.key == "dec_depths") {
        std::vector<size_t> v;
        for (const auto& w : ws) v.push_back(usize(w));
        if (v.empty()) throw bad_value(e, "expected at least one value");
        if (e.key == "dims") m.dims = v;
        else if (e.key == "heads") m.heads = v;
        else if (e.key == "sr") m.sr_ratios = v;
        else if (e.key == "enc_depths") m.enc_depths = v;
        else m.dec_depths = v;
    } else if (e.key == "ffn_ratio") m.ffn_ratio = usize(e.value);
    else if (e.key == "final_dim") m.final_dim = usize(e.value);
    else if (e.key == "rank_attn") m.rank_attn = static_cast<uint32_t>(to_u64(e, e.value));
    else if (e.key == "rank_ffn") m.rank_ffn = static_cast<uint32_t>(to_u64(e, e.value));
    else if (e.key == "rank_conv") m.rank_conv = static_cast<uint32_t>(to_u64(e, e.value));
    else if (e.key == "alpha_attn") m.alpha_attn = to_double(e, e.value);
    else if (e.key == "alpha_ffn") m.alpha_ffn = to_double(e, e.value);
    else if (e.key == "alpha_conv") m.alpha_conv = to_double(e, e.value);
    else if (e.key == "conv_pos_enc") m.conv_pos_enc = to_flag(e);
    else if (e.key == "ln_eps") m.ln_eps = to_double(e, e.value);
    else throw bad_value(e, "unknown model key");
}

inline void apply_task_key(SyntheticTaskRecipe& t, const IniEntry& e) {
    if (e.key == "shape") {
        const auto v = fixed_list<uint64_t, 3>(e, &to_u64);
        t.shape = {static_cast<size_t>(v[0]), static_cast<size_t>(v[1]),
                   static_cast<size_t>(v[2])};
    } else if (e.key == "spacing") {
        t.spacing = fixed_list<double, 3>(e, &to_double);
    } else if (e.key == "band") {
        const auto v = fixed_list<double, 2>(e, &to_double);
        t.band_lo = v[0];
        t.band_hi = v[1];
    } else if (e.key == "samples") {
        t.samples = static_cast<size_t>(to_u64(e, e.value));
    } else if (e.key == "noise") {
        t.noise = to_double(e, e.value);
    } else if (e.key == "seed") {
        t.seed = to_u64(e, e.value);
    } else if (e.key == "organ") {
        const auto ws = words(e.value);
        if (ws.size() != 5)
            throw bad_value(e, "expected: organ = <class> <primitive> <rmin> <rmax> <intensity>");
        OrganSpec o;
        o.class_name = ws[0];
        try {
            o.primitive = primitive_from_name(ws[1]);
        } catch (const RecipeError& err) {
            throw bad_value(e, err.what());
        }
        o.min_radius = to_double(e, ws[2]);
        o.max_radius = to_double(e, ws[3]);
        o.intensity = to_double(e, ws[4]);
        t.organs.push_back(std::move(o));
    } else {
        throw bad_value(e, "unknown task key");
    }
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text) {
    const auto entries = detail::parse_ini(text);

    RunConfig rc;
    // the scale preset must win over file order, so resolve it first
    for (const auto& e : entries) {
        if (e.section != "model" || e.key != "scale") continue;
        if (e.value == "desk") rc.model = PvtConfig::desk();
        else if (e.value == "full") rc.model = PvtConfig::full_scale();
        else throw detail::bad_value(e, "expected desk or full");
    }

    std::vector<uint32_t> task_ids;
    for (const auto& e : entries) {
        if (e.section == "model") {
            if (e.key == "scale") continue;
            detail::apply_model_key(rc.model, e);
        } else if (e.section == "ablation") {
            if (e.key == "attn") rc.model.adapt_attn = detail::to_flag(e);
            else if (e.key == "ffn") rc.model.adapt_ffn = detail::to_flag(e);
            else if (e.key == "conv") rc.model.adapt_conv = detail::to_flag(e);
            else throw detail::bad_value(e, "unknown ablation key");
        } else if (e.section == "run") {
            if (e.key == "seed") rc.seed = detail::to_u64(e, e.value);
            else if (e.key == "epochs_base") rc.epochs_base = detail::to_u64(e, e.value);
            else if (e.key == "epochs_task") rc.epochs_task = detail::to_u64(e, e.value);
            else if (e.key == "lr") rc.lr = detail::to_double(e, e.value);
            else if (e.key == "weight_decay") rc.weight_decay = detail::to_double(e, e.value);
            else if (e.key == "out") rc.out_dir = e.value;
            else throw detail::bad_value(e, "unknown run key");
        } else if (e.section.rfind("task ", 0) == 0) {
            detail::IniEntry id_probe = e;
            id_probe.key = "task id";
            const uint32_t id =
                static_cast<uint32_t>(detail::to_u64(id_probe, e.section.substr(5)));
            if (task_ids.empty() || task_ids.back() != id) {
                if (!rc.tasks.empty() && id <= task_ids.back())
                    throw ConfigError("task sections must appear in increasing id order");
                for (uint32_t seen : task_ids)
                    if (seen == id)
                        throw ConfigError("task " + std::to_string(id) + " declared twice");
                SyntheticTaskRecipe t;
                t.task_id = id;
                rc.tasks.push_back(t);
                task_ids.push_back(id);
            }
            detail::apply_task_key(rc.tasks.back(), e);
        } else {
            throw ConfigError("line " + std::to_string(e.line) + ": unknown section [" +
                              e.section + "]");
        }
    }

    if (rc.tasks.empty()) throw ConfigError("run config declares no tasks");
    if (rc.tasks.front().task_id != 0) throw ConfigError("the first task must have id 0");
    if (rc.lr <= 0.0) throw ConfigError("lr must be positive");
    if (rc.weight_decay < 0.0) throw ConfigError("weight_decay must not be negative");
    if (rc.epochs_base < 1 || rc.epochs_task < 1)
        throw ConfigError("epoch counts must be at least 1");
    rc.model.validate();
    for (const auto& t : rc.tasks) {
        if (t.organs.empty())
            throw ConfigError("task " + std::to_string(t.task_id) + " declares no organs");
        try {
            t.validate();
        } catch (const RecipeError& err) {
            throw ConfigError("task " + std::to_string(t.task_id) + ": " + err.what());
        }
    }
    return rc;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_run_config(buf.str());
}

}  // namespace loco
