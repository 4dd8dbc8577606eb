#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "loco/checkpoint.hpp"
#include "loco/nn.hpp"
#include "loco/pvt.hpp"
#include "loco/synthdata.hpp"

namespace loco {

struct TaskSpec {
    uint32_t task_id = 0;
    std::vector<std::string> classes;
    uint64_t seed = 0;

    void validate() const {
        if (classes.empty()) throw ConfigError("task needs at least one class");
        std::map<std::string, int> seen;
        for (const auto& c : classes) {
            if (c.empty()) throw ConfigError("class names must not be empty");
            if (++seen[c] > 1)
                throw ConflictError("duplicate class '" + c + "' in task " + std::to_string(task_id));
        }
    }
};

struct TrainOptions {
    size_t epochs = 1;
    double lr = 1e-4;
    double weight_decay = 3e-5;
};

struct EpochStats {
    double train_loss = 0.0;
    double val_loss = 0.0;
};

struct TrainStats {
    std::vector<EpochStats> epochs;
    double final_val_loss = 0.0;
};

struct PredictionMap {
    uint32_t task_id = 0;
    std::map<std::string, Tensor> probs;  // class -> [H, W, D]
};

// Task-incremental training driver. Task 0 trains the whole network, then the
// backbone is frozen and checksummed; every later task only instantiates and
// trains its own low-rank adapters plus a fresh head. Because earlier tasks'
// parameters are never part of a later optimizer, finishing task t+1 cannot
// move any output of tasks <= t.
class ContinualEngine {
public:
    ContinualEngine(const PvtConfig& cfg, uint64_t model_seed)
        : model_(cfg, model_seed), model_seed_(model_seed) {}

    Pvt3d& model() { return model_; }
    const Pvt3d& model() const { return model_; }
    bool frozen() const { return frozen_; }

    uint64_t base_checksum() const {
        if (!frozen_) throw ContractError("backbone checksum is defined once the base is frozen");
        return base_checksum_;
    }

    const std::vector<uint32_t>& task_order() const { return order_; }

    const TaskSpec& task(uint32_t id) const {
        auto it = tasks_.find(id);
        if (it == tasks_.end())
            throw MissingAdapterError("unknown task " + std::to_string(id));
        return it->second;
    }

    bool has_task(uint32_t id) const { return tasks_.count(id) != 0; }

    TrainStats train_base(const TaskSpec& spec, const std::vector<VolumeSample>& train,
                          const std::vector<VolumeSample>& val, const TrainOptions& opt) {
        spec.validate();
        if (frozen_) throw ContractError("base task already trained; use a continual step");
        if (spec.task_id != 0) throw ConflictError("the base task must have id 0");
        if (train.empty()) throw ContractError("base training needs at least one sample");

        model_.add_head(0, spec.classes.size(), spec.seed);
        ParamMap trainable = model_.base_params();
        for (auto& [name, t] : model_.head_params(0)) trainable.emplace(name, t);
        set_trainable(trainable, true);
        TrainStats stats = run_training(spec, trainable, train, val, opt);
        set_trainable(trainable, false);

        frozen_ = true;
        base_checksum_ = model_.base_checksum();
        register_task(spec);
        return stats;
    }

    TrainStats continual_step(const TaskSpec& spec, const std::vector<VolumeSample>& train,
                              const std::vector<VolumeSample>& val, const TrainOptions& opt) {
        spec.validate();
        if (!frozen_) throw ContractError("train the base task before any continual step");
        if (spec.task_id == 0) throw ConflictError("task id 0 is reserved for the base task");
        if (tasks_.count(spec.task_id))
            throw ConflictError("task " + std::to_string(spec.task_id) + " already trained");
        if (train.empty()) throw ContractError("continual training needs at least one sample");

        model_.add_adapters(spec.task_id, spec.seed);
        model_.add_head(spec.task_id, spec.classes.size(), spec.seed);
        ParamMap trainable = model_.adapter_params(spec.task_id);
        for (auto& [name, t] : model_.head_params(spec.task_id)) trainable.emplace(name, t);
        set_trainable(trainable, true);
        TrainStats stats = run_training(spec, trainable, train, val, opt);
        set_trainable(trainable, false);

        if (model_.base_checksum() != base_checksum_)
            throw ContractError("frozen backbone changed during a continual step");
        register_task(spec);
        return stats;
    }

    // Raw per-class probabilities [C, H, W, D] for one task.
    Tensor probabilities(const Tensor& image, uint32_t task) const {
        if (!tasks_.count(task)) throw MissingAdapterError("unknown task " + std::to_string(task));
        return model_.forward(image, static_cast<int64_t>(task));
    }

    PredictionMap predict(const Tensor& image, uint32_t task) const {
        const TaskSpec& spec = this->task(task);
        Tensor probs = probabilities(image, task);
        PredictionMap pm;
        pm.task_id = task;
        const size_t plane = probs.numel() / probs.dim(0);
        for (size_t c = 0; c < spec.classes.size(); ++c) {
            Tensor m = Tensor::zeros({probs.dim(1), probs.dim(2), probs.dim(3)});
            std::copy_n(probs.raw() + c * plane, plane, m.raw());
            pm.probs.emplace(spec.classes[c], std::move(m));
        }
        return pm;
    }

    // Adapter parameters of all continual tasks relative to the backbone.
    double parameter_increase_ratio() const {
        const size_t base = count_elements(model_.base_params());
        size_t added = 0;
        for (uint32_t id : order_)
            if (id != 0) added += count_elements(model_.adapter_params(id));
        return static_cast<double>(added) / static_cast<double>(base);
    }

    // --- persistence ---------------------------------------------------------

    void save_base(const std::string& path) const {
        if (!frozen_) throw ContractError("save the base only after training it");
        write_checkpoint(path, base_checksum_, {Shard{0, 0, model_.base_params()}});
    }

    void load_base(const std::string& path) {
        if (frozen_) throw ContractError("base already present in this engine");
        Checkpoint cp = read_checkpoint(path);
        if (cp.shards.size() != 1 || cp.shards[0].kind != 0)
            throw FormatError("expected a single backbone shard in " + path);
        ParamMap dst = model_.base_params();
        load_params(dst, cp.shards[0].tensors);
        frozen_ = true;
        base_checksum_ = model_.base_checksum();
        if (base_checksum_ != cp.base_checksum)
            throw ChecksumError("backbone digest mismatch after loading " + path);
    }

    void save_task(const std::string& path, uint32_t task) const {
        if (!tasks_.count(task)) throw MissingAdapterError("unknown task " + std::to_string(task));
        ParamMap tensors;
        if (task != 0)
            tensors = model_.adapter_params(task);
        for (const auto& [name, t] : model_.head_params(task)) tensors.emplace(name, t);
        write_checkpoint(path, base_checksum_, {Shard{1, task, tensors}});
    }

    // Restores one task's adapters and head. The spec supplies the class
    // names (checkpoints carry tensors, not task metadata); the file must
    // have been trained against this exact backbone.
    void load_task(const std::string& path, const TaskSpec& spec) {
        spec.validate();
        if (!frozen_) throw ContractError("load the base before any task shard");
        if (tasks_.count(spec.task_id))
            throw ConflictError("task " + std::to_string(spec.task_id) + " already present");
        Checkpoint cp = read_checkpoint(path);
        if (cp.shards.size() != 1 || cp.shards[0].kind != 1)
            throw FormatError("expected a single task shard in " + path);
        if (cp.shards[0].task_id != spec.task_id)
            throw ConflictError("file " + path + " holds task " +
                                std::to_string(cp.shards[0].task_id) + ", expected " +
                                std::to_string(spec.task_id));
        if (cp.base_checksum != base_checksum_)
            throw ChecksumError("task shard in " + path + " was trained against a different backbone");

        if (spec.task_id != 0) model_.add_adapters(spec.task_id, spec.seed);
        model_.add_head(spec.task_id, spec.classes.size(), spec.seed);
        ParamMap dst;
        if (spec.task_id != 0) dst = model_.adapter_params(spec.task_id);
        for (const auto& [name, t] : model_.head_params(spec.task_id)) dst.emplace(name, t);
        load_params(dst, cp.shards[0].tensors);
        register_task(spec);
    }

private:
    void register_task(const TaskSpec& spec) {
        tasks_.emplace(spec.task_id, spec);
        order_.push_back(spec.task_id);
    }

    TrainStats run_training(const TaskSpec& spec, ParamMap& trainable,
                            const std::vector<VolumeSample>& train,
                            const std::vector<VolumeSample>& val, const TrainOptions& opt) {
        AdamW optimizer(opt.lr, opt.weight_decay);
        for (auto& [name, t] : trainable) optimizer.add_param(name, t);

        TrainStats stats;
        std::vector<size_t> order(train.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng order_rng(derive_seed(spec.seed, "epoch-order"));

        for (size_t epoch = 0; epoch < opt.epochs; ++epoch) {
            order_rng.shuffle(order);
            double total = 0.0;
            for (size_t i : order) {
                const VolumeSample& s = train[i];
                Tensor target = stack_masks(s, spec.classes);
                optimizer.zero_grads();
                Tape tape;
                Tensor loss = dice_bce_loss(model_.forward(s.image, spec.task_id), target);
                tape.backward(loss);
                optimizer.step();
                total += loss.value();
            }
            EpochStats es;
            es.train_loss = total / static_cast<double>(train.size());
            es.val_loss = evaluate_loss(spec, val.empty() ? train : val);
            stats.epochs.push_back(es);
        }
        stats.final_val_loss = stats.epochs.empty() ? 0.0 : stats.epochs.back().val_loss;
        return stats;
    }

    double evaluate_loss(const TaskSpec& spec, const std::vector<VolumeSample>& samples) const {
        double total = 0.0;
        for (const auto& s : samples) {
            Tensor target = stack_masks(s, spec.classes);
            total += dice_bce_loss(model_.forward(s.image, spec.task_id), target).value();
        }
        return total / static_cast<double>(samples.size());
    }

    Pvt3d model_;
    uint64_t model_seed_ = 0;
    bool frozen_ = false;
    uint64_t base_checksum_ = 0;
    std::map<uint32_t, TaskSpec> tasks_;
    std::vector<uint32_t> order_;
};

}  // namespace loco
