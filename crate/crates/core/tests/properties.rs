use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use promptvc_core::audio::MelSpectrogram;
use promptvc_core::autograd::Mat;
use promptvc_core::cfm::{self, FlowTime, LossNormalization, SigmaMin};
use promptvc_core::factorize::MixupPlan;
use promptvc_core::melfile::{read_mel, write_mel};
use promptvc_core::pipeline::epoch_batches;

fn noise(rows: usize, cols: usize, seed: u64) -> Mat {
    cfm::sample_noise(rows, cols, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #[test]
    fn ot_path_is_affine_in_t(rows in 1usize..12, cols in 1usize..12, seed: u64, t in 0.0f64..=1.0, sigma in 1e-6f64..0.5) {
        let (x0, x1) = (noise(rows, cols, seed), noise(rows, cols, seed ^ 1));
        let sigma = SigmaMin::new(sigma).unwrap();
        let at = |t: f64| cfm::ot_path(&x0, &x1, FlowTime::new(t).unwrap(), sigma).unwrap();
        let mid = at(t);
        let lerp = &at(0.0) * (1.0 - t) + &at(1.0) * t;
        prop_assert!((&mid - &lerp).iter().all(|v| v.abs() < 1e-12));
        let slope = cfm::ot_target(&x0, &x1, sigma).unwrap();
        prop_assert!((&(&at(1.0) - &at(0.0)) - &slope).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn masks_are_one_run_in_range(frames in 1usize..400, seed: u64) {
        let mask = cfm::sample_mask(frames, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (start, len) = mask.run();
        prop_assert!(len >= 1 && start + len <= frames);
        let lo = ((0.7 * frames as f64).round() as usize).max(1);
        prop_assert!(len >= lo && len <= frames);
        let v = mask.to_vec();
        prop_assert_eq!(v.iter().filter(|&&m| m == 1).count(), len);
        prop_assert!(v[start..start + len].iter().all(|&m| m == 1));
    }

    #[test]
    fn mixup_plans_are_derangements(batch in 2usize..32, rate in 0.0f64..=1.0, seed: u64) {
        let plan = MixupPlan::sample(batch, rate, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut seen = vec![false; batch];
        for (i, &j) in plan.permutation().iter().enumerate() {
            prop_assert!(j != i);
            prop_assert!(!seen[j]);
            seen[j] = true;
        }
        let flagged = plan.apply_flags().iter().filter(|&&f| f).count();
        let expect = rate * batch as f64;
        prop_assert!(flagged as f64 >= expect.floor() && flagged as f64 <= expect.ceil());
        prop_assert!(MixupPlan::new(plan.permutation().to_vec(), plan.apply_flags().to_vec()).is_ok());
    }

    #[test]
    fn masked_loss_ignores_visible_frames(frames in 1usize..60, bins in 1usize..10, seed: u64, junk in -1e4f64..1e4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = cfm::sample_mask(frames, &mut rng).unwrap();
        let pred = noise(frames, bins, seed ^ 2);
        let target = noise(frames, bins, seed ^ 3);
        let mut moved = pred.clone();
        for f in (0..frames).filter(|&f| !mask.is_masked(f)) {
            moved.row_mut(f).fill(junk);
        }
        let a = cfm::masked_mse(&pred, &target, &mask, LossNormalization::MaskedElements).unwrap();
        let b = cfm::masked_mse(&moved, &target, &mask, LossNormalization::MaskedElements).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert_eq!(a, b);
        let all = cfm::masked_mse(&pred, &target, &mask, LossNormalization::AllElements).unwrap();
        prop_assert!((all - a * mask.masked_fraction()).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn mel_files_round_trip(frames in 1usize..20, bins in 1usize..90, seed: u64, hop in 1usize..1000) {
        let mel = MelSpectrogram::new(noise(frames, bins, seed) * 7.0, hop, 16_000);
        let mut bytes = Vec::new();
        write_mel(&mel, &mut bytes).unwrap();
        let back = read_mel(bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &mel);
        prop_assert!(read_mel(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn epochs_partition_the_dataset(lengths in prop::collection::vec(1usize..200, 1..60), batch in 1usize..10, seed: u64, epoch in 0u64..5) {
        let batches = epoch_batches(&lengths, batch, seed, epoch);
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= batch));
        let mut all: Vec<usize> = batches.into_iter().flatten().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..lengths.len()).collect::<Vec<_>>());
    }
}
