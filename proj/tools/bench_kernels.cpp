// Times the OpenMP kernels against their serial references and a full
// language-model training step. The parallel variants must match the serial
// ones bit for bit; this binary reports how much time they save.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <vector>

#include "pandagpt/graph.hpp"
#include "pandagpt/kernels.hpp"
#include "pandagpt/langmodel.hpp"
#include "pandagpt/rng.hpp"

using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

pgpt::Tensor random_tensor(std::vector<int> shape, pgpt::Rng& rng) {
    pgpt::Tensor t(std::move(shape));
    for (float& v : t.data) v = rng.next_gaussian_f32();
    return t;
}

void bench_matmul(int m, int k, int n) {
    pgpt::Rng rng(7);
    const pgpt::Tensor a = random_tensor({m, k}, rng);
    const pgpt::Tensor b = random_tensor({k, n}, rng);
    pgpt::Tensor c_serial({m, n}), c_par({m, n});

    const double flops = 2.0 * m * k * n;
    const int reps = std::max(1, static_cast<int>(4e8 / flops));

    auto t0 = Clock::now();
    for (int r = 0; r < reps; ++r)
        pgpt::kernels::matmul_nn_serial(a.data.data(), b.data.data(), c_serial.data.data(), m, k, n);
    const double serial_s = seconds_since(t0) / reps;

    t0 = Clock::now();
    for (int r = 0; r < reps; ++r)
        pgpt::kernels::matmul_nn(a.data.data(), b.data.data(), c_par.data.data(), m, k, n);
    const double par_s = seconds_since(t0) / reps;

    const bool identical =
        std::memcmp(c_serial.data.data(), c_par.data.data(), c_serial.data.size() * sizeof(float)) == 0;
    std::printf("matmul %4dx%dx%-4d  serial %8.2f GF/s  dispatch %8.2f GF/s  speedup %.2fx  bitwise %s\n",
                m, k, n, flops / serial_s / 1e9, flops / par_s / 1e9, serial_s / par_s,
                identical ? "equal" : "DIFFER");
}

void bench_lm_step() {
    pgpt::Rng rng(11);
    const pgpt::ParamMap lm = pgpt::lm_init(rng);
    std::vector<int> doc;
    for (int i = 0; i < 32; ++i) doc.push_back(i % 60);

    const int reps = 20;
    auto t0 = Clock::now();
    double sink = 0.0;
    for (int r = 0; r < reps; ++r) {
        pgpt::Graph g;
        pgpt::LmLeaves leaves = pgpt::lm_insert_leaves(g, lm, true);
        std::vector<int> inputs(doc.begin(), doc.end() - 1);
        std::vector<int> targets(doc.begin() + 1, doc.end());
        pgpt::NodeId emb = g.gather_rows(leaves.wte, inputs);
        pgpt::NodeId logits = pgpt::lm_forward_graph(g, leaves, emb);
        pgpt::NodeId loss =
            g.masked_cross_entropy(logits, targets, std::vector<uint8_t>(targets.size(), 1));
        g.backward(loss);
        sink += g.value_f64(loss);
    }
    const double per_step = seconds_since(t0) / reps;
    std::printf("lm forward+backward (T=31)  %7.2f ms/step  (loss %.3f)\n", per_step * 1e3, sink / reps);
}

}  // namespace

int main() {
    std::printf("threads available: %d\n", pgpt::kernels::max_threads());
    bench_matmul(16, 64, 64);
    bench_matmul(64, 64, 64);
    bench_matmul(256, 256, 256);
    bench_matmul(1024, 256, 256);
    bench_lm_step();
    return 0;
}
