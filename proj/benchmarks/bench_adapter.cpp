#include <benchmark/benchmark.h>

#include "semfed/adapter.hpp"
#include "semfed/rng.hpp"
#include "semfed/skb.hpp"
#include "semfed/trainer.hpp"

using namespace semfed;

namespace {

struct Fixture {
    AdapterParams params;
    Skb skb;
    LossInputs inputs;
    TrainConfig cfg;

    Fixture(std::size_t pairs, std::size_t d_h, std::size_t d_s) {
        const EncoderSignature img{Modality::image, 0, 256};
        const EncoderSignature txt{Modality::text, 0, 128};
        AdapterHyper hyper;
        params = init_adapter_params({img, txt}, d_h, d_s, hyper, 1.5, 11);

        Rng rng(derive_seed(11, "bench"));
        Matrix protos(20, d_s);
        for (std::size_t i = 0; i < protos.size(); ++i) protos.data()[i] = rng.normal();
        std::vector<std::uint32_t> ids(20);
        for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::uint32_t>(i);
        skb = build_skb(protos, ids);

        BatchSlice a, b;
        a.signature = img;
        b.signature = txt;
        a.features = Matrix(pairs, img.dim);
        b.features = Matrix(pairs, txt.dim);
        for (std::size_t i = 0; i < a.features.size(); ++i) a.features.data()[i] = rng.normal();
        for (std::size_t i = 0; i < b.features.size(); ++i) b.features.data()[i] = rng.normal();
        for (std::size_t i = 0; i < pairs; ++i) {
            a.sample_ids.push_back(i);
            b.sample_ids.push_back(1000 + i);
        }
        inputs.batch.push_back(std::move(a));
        inputs.batch.push_back(std::move(b));
        for (std::size_t i = 0; i < 2 * pairs; ++i) inputs.anchor_idx.push_back(i % 20);
        inputs.retained.assign(pairs, 1);
    }
};

void BM_adapter_forward(benchmark::State& state) {
    Fixture f(static_cast<std::size_t>(state.range(0)), 64, 64);
    for (auto _ : state) {
        AdapterOutput out = adapter_forward(f.inputs.batch, f.params);
        benchmark::DoNotOptimize(out.tokens.data());
    }
}
BENCHMARK(BM_adapter_forward)->Arg(32)->Arg(128);

void BM_backward(benchmark::State& state) {
    Fixture f(static_cast<std::size_t>(state.range(0)), 64, 64);
    for (auto _ : state) {
        AdapterParams grads = backward(f.inputs, f.params, f.skb, f.cfg, nullptr);
        benchmark::DoNotOptimize(grads.out_proj.data());
    }
}
BENCHMARK(BM_backward)->Arg(32)->Arg(128);

void BM_local_update(benchmark::State& state) {
    const std::size_t pairs = static_cast<std::size_t>(state.range(0));
    Fixture f(pairs, 64, 64);
    ShardView shard;
    shard.img_features = &f.inputs.batch[0].features;
    shard.txt_features = &f.inputs.batch[1].features;
    shard.img_sig = f.inputs.batch[0].signature;
    shard.txt_sig = f.inputs.batch[1].signature;
    for (std::size_t i = 0; i < pairs; ++i)
        shard.pairs.push_back(PairRef{i, static_cast<std::uint32_t>(i),
                                      static_cast<std::uint32_t>(i)});
    TrainConfig cfg;
    cfg.local_epochs = 1;
    cfg.seed = 17;
    for (auto _ : state) {
        LabelLedger ledger;
        LocalUpdateResult res = local_update(f.params, shard, ledger, f.skb, cfg, 0);
        benchmark::DoNotOptimize(res.stats.mean_loss);
    }
}
BENCHMARK(BM_local_update)->Arg(64);

}  // namespace

BENCHMARK_MAIN();
