use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mvfuse::cluster::{kmeans, KMeansConfig};
use mvfuse::contrastive::knn_indices;
use mvfuse::fusion::{FusionConfig, FusionNet, GateKind};
use mvfuse::nn::{Forward, ParamStore};
use mvfuse::par;
use mvfuse::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn bench_gemm(c: &mut Criterion) {
    let (a, b) = (random(&[512, 512], 1), random(&[512, 512], 2));
    let mut g = c.benchmark_group("gemm_512");
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_function(name, |bench| {
            bench.iter(|| {
                let mut t = Tape::new();
                let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
                t.matmul(x, y).unwrap()
            })
        });
    }
    g.finish();
}

fn bench_conv(c: &mut Criterion) {
    let (x, w, bias) = (random(&[64, 32, 128], 3), random(&[64, 32, 3], 4), random(&[64], 5));
    let mut g = c.benchmark_group("conv1d_64x32x128");
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_function(name, |bench| {
            bench.iter(|| {
                let mut t = Tape::new();
                let (x, w, b) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(bias.clone()));
                t.conv1d(x, w, b, 1, 1).unwrap()
            })
        });
    }
    g.finish();
}

fn bench_knn_kmeans(c: &mut Criterion) {
    let z = random(&[2000, 64], 6);
    let mut g = c.benchmark_group("clustering_2000x64");
    g.sample_size(10);
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_with_input(BenchmarkId::new("knn_k10", name), &z, |bench, z| bench.iter(|| knn_indices(z, 10).unwrap()));
        g.bench_with_input(BenchmarkId::new("kmeans_k10", name), &z, |bench, z| {
            bench.iter(|| kmeans(z, &KMeansConfig::new(10, 0)).unwrap())
        });
    }
    g.finish();
}

fn bench_fusion(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let cfg = FusionConfig {
        views: 3,
        latent_dim: 128,
        depth: 3,
        base_channels: 8,
        reduction: 4,
        gate: GateKind::Sigmoid,
    };
    let net = FusionNet::new(&mut store, &mut ChaCha8Rng::seed_from_u64(7), cfg).unwrap();
    let views: Vec<Tensor> = (0..3).map(|m| random(&[64, 128], 10 + m)).collect();
    let mut g = c.benchmark_group("fusion_forward_b64");
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_function(name, |bench| {
            bench.iter(|| {
                let mut f = Forward::eval(&store);
                let vars: Vec<Var> = views.iter().map(|v| f.input(v.clone())).collect();
                net.forward(&mut f, &vars).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench_gemm, bench_conv, bench_knn_kmeans, bench_fusion);
criterion_main!(benches);
