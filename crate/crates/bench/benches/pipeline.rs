use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use ux_core::afm::afm_forward;
use ux_core::epa::{build_memory_pool, epa_forward};
use ux_core::fft::fft2_real;
use ux_core::grid::{partition_regions, EventRegistry};
use ux_core::model::{Model, TrainConfig};
use ux_core::spectral::{radial_index, region_hfa, TransformKind};
use ux_core::synth::{generate_synthetic, SyntheticSpec};

fn small_data() -> ux_core::synth::Dataset {
    let spec = SyntheticSpec { height: 20, width: 20, timesteps: 6, box_min: 4, box_max: 7, ..SyntheticSpec::default() };
    generate_synthetic(&spec).unwrap()
}

fn spectral(c: &mut Criterion) {
    let field: Vec<f64> = (0..60 * 60).map(|i| ((i * 7919) % 101) as f64 / 101.0).collect();
    c.bench_function("fft2_real 60x60", |b| b.iter(|| fft2_real(black_box(&field), 60, 60)));

    let data = generate_synthetic(&SyntheticSpec { timesteps: 1, ..SyntheticSpec::default() }).unwrap();
    let part = partition_regions(&data.grids[0], 10, 10).unwrap();
    let idx = radial_index(10, 10, TransformKind::RealInput);
    c.bench_function("region_hfa x36 (60x60 grid)", |b| {
        b.iter(|| part.regions.iter().map(|r| region_hfa(r.view(), &idx).unwrap()[0]).sum::<f64>())
    });
}

fn modules(c: &mut Criterion) {
    let data = small_data();
    let all: Vec<_> = data.events.iter().flatten().cloned().collect();
    let registry = EventRegistry::from_events(&all).unwrap();
    let corpus = data.grids.iter().zip(data.events.iter().map(Vec::as_slice));
    let pool = build_memory_pool(corpus, &registry, 10, 10, 2, 0).unwrap();
    let model = Model::new(TrainConfig::desk(), 2).unwrap();
    let p = model.init_params(0);
    let grid = &data.grids[0];
    let region = partition_regions(grid, 10, 10).unwrap().regions.swap_remove(0);

    c.bench_function("epa_forward 10x10x2", |b| b.iter(|| epa_forward(region.view(), &pool, &p.epa).unwrap()));
    c.bench_function("afm_forward 10x10x2", |b| {
        b.iter(|| afm_forward(region.view(), region.view(), &grid.calendar(), &p.afm, &model.layout).unwrap())
    });
    c.bench_function("model forward 20x20x2 (desk)", |b| b.iter(|| model.forward(grid, Some(&pool), &p).unwrap()));
    let pair = ux_core::model::build_transitions(&data.grids[..2], &data.masks().unwrap()[..2]).unwrap();
    c.bench_function("model loss+grad 20x20x2 (desk)", |b| b.iter(|| model.loss_and_grad(&pair[0], Some(&pool), &p).unwrap()));
}

criterion_group!(benches, spectral, modules);
criterion_main!(benches);
