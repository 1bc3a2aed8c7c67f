use tfrmt_core::analysis::{band_means, element_variances};
use tfrmt_core::config::ExperimentConfig;
use tfrmt_core::experiment::{
    basis_at, pe_timefront, prepare, profile_for, rmt_timefront, rmt_unitary_member, unperturbed_timefront,
    Needs,
};
use tfrmt_core::io::{read_grid, timefront_from_grid, timefront_to_grid, write_grid};
use tfrmt_core::{DepthSelection, KGrid, SourceSpec};

fn toy() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.source = SourceSpec {
        f0: 20.0,
        sigma_f: 5.0,
        ..SourceSpec::default()
    };
    cfg.environment.waves.j_max = 4;
    cfg.environment.waves.kl_count = 32;
    cfg.ensemble.block_range = 5.0;
    cfg
}

#[test]
fn energy_is_shared_by_both_paths() {
    let mut cfg = toy();
    cfg.numerics.depths = DepthSelection::full(&cfg.numerics.depth_grid);
    cfg.ensemble.blocks = 2;
    let kg = KGrid::new(&cfg.source, cfg.environment.guide.c0, 8).unwrap();
    let prep = prepare(
        &cfg,
        &kg,
        Needs {
            profiles: true,
            launch_fields: true,
        },
    )
    .unwrap();
    let dz = cfg.numerics.depth_grid.dz();
    let reference = unperturbed_timefront(&cfg, &prep, cfg.range()).unwrap().energy(dz);
    for member in 0..3 {
        let rmt = rmt_timefront(&cfg, &prep, member).unwrap().energy(dz);
        let (pe, _) = pe_timefront(&cfg, &prep, member).unwrap();
        assert!((rmt / reference - 1.0).abs() < 1e-10);
        assert!((pe.energy(dz) / reference - 1.0).abs() < 1e-4);
    }
}

#[test]
fn single_block_variances_approach_four_s_squared() {
    let cfg = toy();
    let basis = basis_at(&cfg, cfg.source.k0(cfg.environment.guide.c0)).unwrap();
    let profile = profile_for(&cfg, &basis).unwrap();
    let members: Vec<_> = (0..400).map(|m| rmt_unitary_member(&cfg, &profile, m).unwrap()).collect();
    let sample = element_variances(&members, None).unwrap();
    let m = profile.mode_count();
    let analytic: Vec<Vec<f64>> = (0..m)
        .map(|r| (0..m).map(|c| 4.0 * profile.values[(r, c)].powi(2)).collect())
        .collect();
    let rows = 0..m / 2;
    let (got, want) = (band_means(&sample, rows.clone(), 3), band_means(&analytic, rows, 3));
    for d in 1..=3 {
        // 400 complex samples per element and many elements per band: a few percent
        // of noise, plus the second-order Cayley correction of relative size ~ s^2.
        assert!((got[d] / want[d] - 1.0).abs() < 0.15, "offset {d}: {} vs {}", got[d], want[d]);
    }
}

#[test]
fn timefront_survives_a_grid_file() {
    let cfg = toy();
    let kg = KGrid::new(&cfg.source, cfg.environment.guide.c0, 8).unwrap();
    let prep = prepare(&cfg, &kg, Needs::default()).unwrap();
    let tf = unperturbed_timefront(&cfg, &prep, 10.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tf.tfg");
    let (h, p) = timefront_to_grid(&tf).unwrap();
    write_grid(&path, &h, &p).unwrap();
    let (h, p) = read_grid(&path).unwrap();
    assert_eq!(timefront_from_grid(&h, &p).unwrap(), tf);
}
