#pragma once

#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "loco/continual.hpp"
#include "loco/fusion.hpp"
#include "loco/metrics.hpp"

namespace loco {

struct ClassResult {
    uint32_t task_id = 0;
    std::string class_name;
    double mean_dsc = 0.0;
    double mean_hd95 = 0.0;
    size_t samples = 0;
};

struct EvaluationReport {
    std::vector<ClassResult> rows;  // task-major, class order as declared
    double all_dsc = 0.0;           // every class weighted equally
    double all_hd95 = 0.0;
    double pir = 0.0;

    std::string to_table() const {
        size_t name_w = 5;
        for (const auto& r : rows) name_w = std::max(name_w, r.class_name.size());
        std::ostringstream os;
        os << std::left << std::setw(6) << "task" << std::setw(name_w + 2) << "class"
           << std::right << std::setw(8) << "dsc" << std::setw(10) << "hd95" << std::setw(5)
           << "n" << "\n";
        os << std::string(6 + name_w + 2 + 8 + 10 + 5, '-') << "\n";
        os << std::fixed;
        for (const auto& r : rows) {
            os << std::left << std::setw(6) << r.task_id << std::setw(name_w + 2)
               << r.class_name << std::right << std::setprecision(4) << std::setw(8)
               << r.mean_dsc << std::setprecision(2) << std::setw(10) << r.mean_hd95
               << std::setw(5) << r.samples << "\n";
        }
        os << std::string(6 + name_w + 2 + 8 + 10 + 5, '-') << "\n";
        os << std::left << std::setw(6) << "all" << std::setw(name_w + 2) << "" << std::right
           << std::setprecision(4) << std::setw(8) << all_dsc << std::setprecision(2)
           << std::setw(10) << all_hd95 << std::setw(5) << "" << "\n";
        os << "parameter increase ratio: " << std::setprecision(6) << pir << "\n";
        return os.str();
    }

    std::string to_csv() const {
        std::ostringstream os;
        os << "task,class,dsc,hd95,samples\n" << std::setprecision(17);
        for (const auto& r : rows)
            os << r.task_id << ',' << r.class_name << ',' << r.mean_dsc << ',' << r.mean_hd95
               << ',' << r.samples << "\n";
        os << "all,," << all_dsc << ',' << all_hd95 << ",\n";
        os << "pir,," << pir << ",,\n";
        return os.str();
    }
};

inline double task_mean_dsc(const EvaluationReport& rep, uint32_t task) {
    double sum = 0.0;
    size_t n = 0;
    for (const auto& r : rep.rows)
        if (r.task_id == task) {
            sum += r.mean_dsc;
            ++n;
        }
    if (n == 0) throw ContractError("no rows for task " + std::to_string(task));
    return sum / static_cast<double>(n);
}

namespace detail {

inline bool mask_empty(const Tensor& m) {
    for (double v : m.data())
        if (v > 0.0) return false;
    return true;
}

inline double volume_diagonal(const Tensor& m, const std::array<double, 3>& spacing) {
    double s = 0.0;
    for (size_t a = 0; a < 3; ++a) {
        const double e = static_cast<double>(m.dim(a)) * spacing[a];
        s += e * e;
    }
    return std::sqrt(s);
}

}  // namespace detail

// Runs the full inference pipeline (axis scores -> per-task range gating ->
// entropy ensembling) over each task's evaluation volumes and scores the
// fused masks against that task's ground truth. An empty prediction against
// a non-empty truth is charged the volume diagonal instead of dropping the
// sample, so failures cannot inflate the boundary statistics.
inline EvaluationReport evaluate(const ContinualEngine& eng, const AxisRegressor& reg,
                                 const std::map<uint32_t, AxialProfile>& profiles,
                                 const std::map<uint32_t, std::vector<VolumeSample>>& eval_sets) {
    if (eval_sets.empty()) throw ContractError("evaluation needs at least one task dataset");
    for (const auto& [task, _] : eval_sets) {
        if (!eng.has_task(task)) throw MissingAdapterError("unknown task " + std::to_string(task));
        if (!profiles.count(task))
            throw ContractError("missing axial profile for task " + std::to_string(task));
    }

    std::map<uint32_t, std::map<std::string, std::pair<double, double>>> acc;  // dsc, hd sums
    std::map<uint32_t, size_t> counts;

    for (const auto& [task, samples] : eval_sets) {
        const TaskSpec& spec = eng.task(task);
        for (const VolumeSample& s : samples) {
            const std::vector<double> scores = reg.predict(s.image);
            std::vector<TaskPrediction> preds;
            for (uint32_t other : eng.task_order()) {
                auto prof = profiles.find(other);
                if (prof == profiles.end()) continue;  // untested task without a profile
                TaskPrediction tp;
                tp.task_id = other;
                tp.probs = eng.predict(s.image, other).probs;
                tp.slice_valid = slices_in_range(scores, prof->second.low, prof->second.high);
                preds.push_back(std::move(tp));
            }
            FusedPrediction fused = entropy_ensemble(preds);
            for (const std::string& cls : spec.classes) {
                const Tensor& pred = fused.masks.at(cls);
                const Tensor& truth = s.masks.at(cls);
                const bool pe = detail::mask_empty(pred), te = detail::mask_empty(truth);
                double d, h;
                if (pe && te) {
                    d = 1.0;
                    h = 0.0;
                } else if (pe || te) {
                    d = 0.0;
                    h = detail::volume_diagonal(truth, s.spacing);
                } else {
                    d = dsc(pred, truth);
                    h = hd95(pred, truth, s.spacing);
                }
                acc[task][cls].first += d;
                acc[task][cls].second += h;
            }
            counts[task] += 1;
        }
    }

    EvaluationReport rep;
    double dsc_sum = 0.0, hd_sum = 0.0;
    size_t class_rows = 0;
    for (const auto& [task, samples] : eval_sets) {
        const TaskSpec& spec = eng.task(task);
        const double n = static_cast<double>(counts[task]);
        for (const std::string& cls : spec.classes) {
            ClassResult r;
            r.task_id = task;
            r.class_name = cls;
            r.mean_dsc = acc[task][cls].first / n;
            r.mean_hd95 = acc[task][cls].second / n;
            r.samples = counts[task];
            dsc_sum += r.mean_dsc;
            hd_sum += r.mean_hd95;
            ++class_rows;
            rep.rows.push_back(std::move(r));
        }
    }
    rep.all_dsc = dsc_sum / static_cast<double>(class_rows);
    rep.all_hd95 = hd_sum / static_cast<double>(class_rows);
    rep.pir = eng.parameter_increase_ratio();
    return rep;
}

}  // namespace loco
