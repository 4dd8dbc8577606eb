// Times one training step (forward + backward + optimizer) and one inference
// pass of the desk-scale model, for sizing training schedules.

#include <chrono>
#include <cstdio>

#include "loco/continual.hpp"

using namespace loco;
using Clock = std::chrono::steady_clock;

namespace {

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

double time_step(Pvt3d& model, ParamMap& trainable, const Tensor& vol, const Tensor& target,
                 uint32_t task, int reps) {
    AdamW opt(1e-4, 3e-5);
    for (auto& [name, t] : trainable) opt.add_param(name, t);
    // one warm-up step, then the timed repetitions
    double best = 1e300;
    for (int r = 0; r <= reps; ++r) {
        const auto t0 = Clock::now();
        opt.zero_grads();
        Tape tape;
        Tensor loss = dice_bce_loss(model.forward(vol, task), target);
        tape.backward(loss);
        opt.step();
        const double ms = ms_since(t0);
        if (r > 0) best = std::min(best, ms);
    }
    return best;
}

}  // namespace

int main() {
    PvtConfig cfg = PvtConfig::desk();
    const uint64_t seed = 7;
    Pvt3d model(cfg, seed);
    model.add_head(0, 1, seed);

    SyntheticTaskRecipe recipe;
    recipe.shape = {32, 32, 16};
    recipe.samples = 1;
    recipe.seed = 11;
    OrganSpec organ;
    organ.class_name = "blob";
    organ.min_radius = 2.0;
    organ.max_radius = 4.0;
    organ.intensity = 0.3;
    recipe.organs.push_back(organ);
    const VolumeSample s = generate_sample(recipe, 0);
    const Tensor target = stack_masks(s, {"blob"});

    std::printf("desk model, volume 32x32x16\n");
    std::printf("base parameters:    %zu\n", count_elements(model.base_params()));

    {
        const auto t0 = Clock::now();
        Tensor probs = model.forward(s.image, 0);
        std::printf("inference forward:  %.1f ms\n", ms_since(t0));
        (void)probs;
    }

    ParamMap base = model.base_params();
    for (auto& [name, t] : model.head_params(0)) base.emplace(name, t);
    set_trainable(base, true);
    std::printf("full step:          %.1f ms\n",
                time_step(model, base, s.image, target, 0, 2));
    set_trainable(base, false);

    model.add_adapters(1, seed + 1);
    model.add_head(1, 1, seed + 1);
    ParamMap adapters = model.adapter_params(1);
    for (auto& [name, t] : model.head_params(1)) adapters.emplace(name, t);
    std::printf("adapter parameters: %zu\n", count_elements(model.adapter_params(1)));
    set_trainable(adapters, true);
    std::printf("adapter step:       %.1f ms\n",
                time_step(model, adapters, s.image, target, 1, 2));

    return 0;
}
