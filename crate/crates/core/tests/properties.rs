use proptest::prelude::*;

use synthbench::ingest::{split_ids, SplitSpec};
use synthbench::patching::{build_patch_grid, gaussian_importance, stitch_data, Patch};
use synthbench::preprocess::{invert_to_original, pad_to_multiple, TransformRecord};
use synthbench::stats::turing::{part3_summary, Question, ResponseRow, StudyConfig, StudyItem};
use synthbench::stats::{average_ranks, wilcoxon_one_tailed};
use synthbench::volume::{read_nifti_bytes, write_nifti_bytes, Geometry, Modality, Volume};

fn dims_for(patch: usize) -> impl Strategy<Value = [usize; 3]> {
    prop::array::uniform3(patch..patch * 3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stitched_ones_are_one((patch, dims) in (4usize..12).prop_flat_map(|p| (Just(p), dims_for(p))),
                             overlap in 0.0f64..0.8, sigma in 0.05f64..0.5) {
        let p = [patch; 3];
        let grid = build_patch_grid(dims, p, overlap).unwrap();
        let imap = gaussian_importance(p, sigma).unwrap();
        let outs: Vec<_> = grid.origins.iter().map(|&o| (o, Patch::filled(p, 1.0))).collect();
        let data = stitch_data(&outs, &grid, &imap).unwrap();
        prop_assert!(data.iter().all(|&v| (v - 1.0).abs() <= 1e-6));
        prop_assert!(grid.coverage().iter().all(|&c| c >= 1));
    }

    #[test]
    fn pad_then_invert_is_exact(dims in prop::array::uniform3(1usize..20), multiple in 1usize..9, fill in -5.0f32..5.0) {
        let g = Geometry::new(dims, [1.0; 3]).unwrap();
        let vol = Volume::from_fn(g, Modality::Ct, |x, y, z| (x * 7 + y * 3 + z) as f32 * 0.37).unwrap();
        let (padded, step) = pad_to_multiple(&vol, multiple, [1; 3], fill).unwrap();
        prop_assert!(padded.dims().iter().all(|d| d % multiple == 0));
        let mut rec = TransformRecord::new(Modality::Ct);
        rec.push(step);
        prop_assert_eq!(invert_to_original(&padded, &rec).unwrap(), vol);
    }

    #[test]
    fn splits_partition_the_ids(n in 8usize..300, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
        let spec = SplitSpec { seed, validation_count: 2, ..SplitSpec::default() };
        let s = split_ids(&ids, &spec).unwrap();
        let mut all: Vec<String> = s.train.iter().chain(&s.validation).chain(&s.test).cloned().collect();
        all.sort();
        let mut want = ids.clone();
        want.sort();
        prop_assert_eq!(all, want);
        prop_assert_eq!(split_ids(&ids, &spec).unwrap(), s);
    }

    #[test]
    fn tails_are_complementary(mags in prop::collection::hash_set(1u32..1000, 1..12), signs in prop::collection::vec(any::<bool>(), 12)) {
        // Distinct magnitudes, so there are no ties.
        let d: Vec<f64> = mags.iter().zip(&signs).map(|(&m, &s)| if s { m as f64 } else { -(m as f64) }).collect();
        let neg: Vec<f64> = d.iter().map(|v| -v).collect();
        let (p1, p2) = (wilcoxon_one_tailed(&d).unwrap(), wilcoxon_one_tailed(&neg).unwrap());
        prop_assert!(p1 + p2 >= 1.0);
        prop_assert!(p1 > 0.0 && p1 <= 1.0);
    }

    #[test]
    fn ranks_sum_to_triangular(values in prop::collection::vec(0u8..6, 1..15)) {
        let v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
        let r = average_ranks(&v, true);
        let n = v.len() as f64;
        prop_assert!((r.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn nifti_bytes_roundtrip(dims in prop::array::uniform3(1usize..8), sp in prop::array::uniform3(0.1f64..5.0), seed in any::<u32>()) {
        let g = Geometry::new(dims, sp).unwrap();
        let vol = Volume::from_fn(g, Modality::Pet, |x, y, z| ((x + 3 * y + 5 * z) as u32 ^ seed) as f32 * 1e-3).unwrap();
        let back = read_nifti_bytes(&write_nifti_bytes(&vol)).unwrap();
        prop_assert_eq!(back.dims(), vol.dims());
        prop_assert_eq!(back.data(), vol.data());
        prop_assert_eq!(back.modality(), Modality::Pet);
        for a in 0..3 {
            prop_assert!((back.spacing()[a] - sp[a]).abs() <= sp[a] * 1e-6);
        }
    }

    #[test]
    fn each_triplet_gives_one_of_each_rank(perms in prop::collection::vec(0usize..6, 1..40)) {
        const PERMS: [&str; 6] = ["1-2-3", "1-3-2", "2-1-3", "2-3-1", "3-1-2", "3-2-1"];
        let item = |v: &str, l: &str| StudyItem { volume_id: v.into(), patient_id: "p".into(), label: l.into() };
        let study = StudyConfig {
            study_id: "s".into(),
            volumes: ["a", "b", "c"].iter().map(|v| (v.to_string(), format!("{v}.nii").into())).collect(),
            questions: vec![Question {
                question_id: "q".into(),
                part: 3,
                task: "t".into(),
                modality: Modality::Ct,
                region: None,
                items: vec![item("a", "real"), item("b", "m1"), item("c", "m2")],
                is_sanity: false,
            }],
        };
        let rows: Vec<ResponseRow> = perms.iter().enumerate().map(|(i, &k)| ResponseRow {
            participant_id: format!("r{i}"),
            question_id: "q".into(),
            part: 3,
            answer: PERMS[k].into(),
            is_sanity: false,
            timestamp: String::new(),
        }).collect();
        let s = part3_summary(&study, &rows).unwrap();
        for pick in [|d: &synthbench::stats::turing::RankDistribution| d.pct_rank1,
                     |d: &synthbench::stats::turing::RankDistribution| d.pct_rank2,
                     |d: &synthbench::stats::turing::RankDistribution| d.pct_rank3] {
            let total: f64 = s.distributions.iter().map(pick).sum();
            prop_assert!((total - 100.0).abs() < 1e-9);
        }
    }
}
