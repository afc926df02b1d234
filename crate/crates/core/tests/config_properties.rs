//! Property tests for config validation: constructed-valid configs are
//! accepted and round-trip through TOML; invariant-breaking mutations are
//! rejected; validation never panics on arbitrary numeric fields.

use proptest::prelude::*;
use vidtok_core::config::RunConfig;

/// Build a config that satisfies every documented invariant by
/// construction, from free choices of the generators.
fn valid_config(
    patch: usize,
    patch_t: usize,
    h_tiles: usize,
    w_tiles: usize,
    f_tiles: usize,
    heads: usize,
    head_dim_units: usize,
) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.shapes.patch = patch;
    cfg.shapes.patch_t = patch_t;
    cfg.shapes.height = patch * h_tiles;
    cfg.shapes.width = patch * w_tiles;
    cfg.shapes.chunk_frames = 1 + patch_t * f_tiles;
    // keep the condensed grid strictly inside the source grid
    cfg.shapes.f_r = (cfg.shapes.f_s() - 1).max(1).min(4);
    cfg.shapes.h_r = (cfg.shapes.h_s() - 1).max(1).min(2);
    cfg.shapes.w_r = (cfg.shapes.w_s() - 1).max(1).min(2);
    cfg.shapes.c_s = 64;
    cfg.shapes.c_r = 8;
    cfg.model.n_heads = heads;
    cfg.model.d_model = heads * 8 * head_dim_units;
    cfg.training.phase1_latent = (cfg.shapes.f_r, 1, 1);
    cfg.schedule.n_partitions = 1;
    cfg.schedule.t_train = cfg.shapes.f_s().max(cfg.schedule.s_sample) * 4;
    cfg
}

proptest! {
    #[test]
    fn constructed_valid_configs_are_accepted_and_round_trip(
        patch in 1usize..5,
        patch_t in 1usize..4,
        h_tiles in 3usize..8,
        w_tiles in 3usize..8,
        f_tiles in 3usize..10,
        heads in 1usize..5,
        head_dim_units in 1usize..3,
    ) {
        let cfg = valid_config(patch, patch_t, h_tiles, w_tiles, f_tiles, heads, head_dim_units);
        prop_assert!(cfg.validate().is_ok(), "rejected: {:?}", cfg.validate());
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        prop_assert_eq!(back.to_toml(), cfg.to_toml());
    }

    #[test]
    fn invariant_breaking_mutations_are_rejected(which in 0usize..12, bump in 1usize..4) {
        let mut cfg = RunConfig::desk();
        match which {
            0 => cfg.shapes.height = cfg.shapes.patch * bump + 1,      // patch misalign
            1 => cfg.shapes.width = cfg.shapes.patch * bump + 1,
            2 => cfg.shapes.chunk_frames = 0,
            3 => cfg.shapes.patch = 0,
            4 => cfg.shapes.f_r = cfg.shapes.f_s() + bump,             // grid not condensed
            5 => cfg.shapes.c_r = cfg.shapes.c_s + bump,
            6 => cfg.model.d_model = cfg.model.n_heads * bump + 1,     // head split
            7 => cfg.schedule.s_sample = cfg.schedule.t_train + bump,
            8 => cfg.schedule.n_partitions = cfg.schedule.t_train,     // levels overflow
            9 => cfg.training.batch_size = 0,
            10 => cfg.training.cond_dropout = 1.0 + bump as f32,
            11 => cfg.training.phase1_latent = (cfg.shapes.f_r + bump, 1, 1),
            _ => unreachable!(),
        }
        prop_assert!(cfg.validate().is_err(), "mutation {which} slipped through");
    }

    #[test]
    fn validation_never_panics(
        chunk_frames in 0usize..20,
        height in 0usize..40,
        width in 0usize..40,
        patch in 0usize..6,
        patch_t in 0usize..6,
        c_s in 0usize..100,
        c_r in 0usize..100,
        f_r in 0usize..10,
        d_model in 0usize..100,
        n_heads in 0usize..10,
    ) {
        let mut cfg = RunConfig::desk();
        cfg.shapes.chunk_frames = chunk_frames;
        cfg.shapes.height = height;
        cfg.shapes.width = width;
        cfg.shapes.patch = patch;
        cfg.shapes.patch_t = patch_t;
        cfg.shapes.c_s = c_s;
        cfg.shapes.c_r = c_r;
        cfg.shapes.f_r = f_r;
        cfg.model.d_model = d_model;
        cfg.model.n_heads = n_heads;
        let _ = cfg.validate();
    }
}
