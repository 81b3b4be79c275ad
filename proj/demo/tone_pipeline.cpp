// Small end-to-end run on the synthetic tone task: pretrain a narrow conv_t
// encoder, learn masks on top of it, trim, and time the two models.
//
// usage: tone_pipeline [mask_steps] [lambda]

#include <cstdio>
#include <cstdlib>

#include "trimlab/trimlab.hpp"

using namespace trimlab;

int main(int argc, char** argv) {
    const std::size_t mask_steps = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 5000;
    const double lambda = argc > 2 ? std::atof(argv[2]) : 0.5;

    TaskSpec pre;
    pre.task = TaskKind::pretext;
    pre.train_size = 400;
    pre.val_size = 100;
    TaskSpec tone;
    tone.train_size = 400;
    tone.val_size = 100;
    tone.test_size = 100;
    const auto pre_train = make_dataset(pre, Split::train), pre_val = make_dataset(pre, Split::val);
    const auto train = make_dataset(tone, Split::train), val = make_dataset(tone, Split::val),
               test = make_dataset(tone, Split::test);

    auto spec = default_spec(Backbone::conv_t, std::nullopt);
    spec.conv_channels = {16, 32, 32, 64};

    TrainConfig pcfg;
    pcfg.mode = Mode::pretrain;
    pcfg.steps = 300;
    pcfg.eval_every = 100;
    auto encoder = run_pretrain(build_backbone<float>(spec, 0), pre_train, pre_val, pcfg).model;
    encoder.spec.head = HeadSpec{64, TaskSpec::kToneClasses};
    reinit_head(encoder, 0);

    TrainConfig mcfg;
    mcfg.mode = Mode::mask;
    mcfg.steps = mask_steps;
    mcfg.eval_every = mask_steps / 5 ? mask_steps / 5 : 1;
    mcfg.sparsity.lambda = lambda;
    const auto run = run_downstream(encoder, {&train, &val, &test}, mcfg);
    for (const auto& h : run.history)
        std::printf("step %5zu  loss %.4f  val w-Acc %.3f  trim %.3f\n", h.step, h.loss, h.metric, h.trim_ratio);

    const auto masks = materialize(run.masks);
    const auto plan = plan_trim(run.model, masks);
    const auto [trimmed, report] = apply_trim(run.model, plan);
    std::printf("test w-Acc %.3f, encoder params %zu -> %zu\n", run.final_eval.test_metric, report.params_before,
                report.params_after);

    const std::vector<std::size_t> first{0};
    const auto x = test.batch_features(first);
    const auto [tb, tt] = time_pair(run.model, trimmed, x);
    const auto in = Shape{x.dim(1), x.dim(2)};
    std::printf("MACs per clip %llu -> %llu\n", static_cast<unsigned long long>(count_costs(run.model.spec, in).macs),
                static_cast<unsigned long long>(count_costs(trimmed.spec, in).macs));
    std::printf("median forward %.4f ms -> %.4f ms (x%.2f)\n", tb.median_ms, tt.median_ms, speedup(tb, tt));
}
