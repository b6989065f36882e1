use proptest::prelude::*;
use tokvox::formats::{grid_from_bytes, grid_to_bytes, teacher_from_bytes, teacher_to_bytes, Checkpoint, GridFile};
use tokvox::RunConfig;
use tokvox_core::codec::distill::TeacherEmbeddings;
use tokvox_core::codec::CodeGrid;
use tokvox_core::Tensor;

fn grid() -> impl Strategy<Value = GridFile> {
    (1usize..5, 1usize..12, 2usize..70_000, 0usize..64).prop_flat_map(|(k, l, cs, pad)| {
        let cs = cs.min(1 << 16);
        prop::collection::vec(0..cs as u32, k * l)
            .prop_map(move |codes| GridFile { grid: CodeGrid::new(k, l, cs, codes).unwrap(), pad })
    })
}

proptest! {
    #[test]
    fn grid_round_trip(g in grid()) {
        prop_assert_eq!(grid_from_bytes(&grid_to_bytes(&g).unwrap()).unwrap(), g);
    }

    #[test]
    fn teacher_round_trip(l in 1usize..6, d in 1usize..5, rate in 1.0f32..100.0, seed in any::<u64>()) {
        let data: Vec<f32> = (0..l * d).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f32 - 500.0) / 7.0).collect();
        let te = TeacherEmbeddings::new(Tensor::new(vec![l, d], data).unwrap(), rate as f64).unwrap();
        prop_assert_eq!(teacher_from_bytes(&teacher_to_bytes(&te).unwrap()).unwrap(), te);
    }

    #[test]
    fn checkpoint_round_trip(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..3), 0..5)) {
        let mut ck = Checkpoint::default();
        for (i, s) in shapes.iter().enumerate() {
            let n: usize = s.iter().product();
            ck.insert(format!("t{i}/ü"), Tensor::new(s.clone(), (0..n).map(|v| v as f32 - 1.5).collect()).unwrap());
        }
        prop_assert_eq!(Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap(), ck);
    }

    #[test]
    fn truncated_files_never_panic(g in grid(), cut in 0usize..64) {
        let b = grid_to_bytes(&g).unwrap();
        let cut = cut.min(b.len().saturating_sub(1));
        prop_assert!(grid_from_bytes(&b[..cut]).is_err());
    }

    #[test]
    fn config_round_trip(seed in 0u64..(1 << 62), steps in 0u64..1_000_000, mel in 0.0f64..100.0, p in 0.0f64..1.0, streams in 1usize..9) {
        let mut c = RunConfig::tiny();
        c.seed = seed;
        c.schedule.codec_steps = steps;
        c.loss_weights.mel = mel;
        c.mapi.mask_prob = p;
        c.mapi.streams = streams;
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, c);
    }
}
