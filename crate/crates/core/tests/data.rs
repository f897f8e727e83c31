use std::collections::BTreeSet;

use fibresr::data::{
    build_target_domain, extract_input_patches, group_keys, normalize_frame, patch_grid, split,
    Domain, DomainSources, Frame, Role, SplitMode,
};
use fibresr::forward_model::synthesize_lr;
use fibresr::image::FieldOfView;
use fibresr::phantom::{synthesize_corpus, CorpusConfig};
use fibresr::{Image, NoiseModel};
use proptest::prelude::*;

const FRACTIONS: [f64; 3] = [0.7, 0.15, 0.15];

fn corpus(frames: usize, fpv: usize, vpp: usize, settings: &[&str], seed: u64) -> Vec<Frame> {
    let c = CorpusConfig {
        frames,
        width: 16,
        height: 16,
        frames_per_video: fpv,
        videos_per_patient: vpp,
        settings: settings.iter().map(|s| s.to_string()).collect(),
        ..Default::default()
    };
    synthesize_corpus(&c, seed).unwrap().lr
}

#[test]
fn patch_grid_matches_coverage_oracle() {
    let img = Image::filled(128, 128, 0.5).with_fov(Some(FieldOfView::inscribed(128, 128)));
    for (size, cov) in [(16, 0.99), (32, 0.99), (16, 0.5), (32, 0.0)] {
        let mut expect = Vec::new();
        for ty in 0..128 / size {
            for tx in 0..128 / size {
                let mut inside = 0;
                for y in ty * size..(ty + 1) * size {
                    for x in tx * size..(tx + 1) * size {
                        let (dx, dy) = (x as f64 + 0.5 - 64.0, y as f64 + 0.5 - 64.0);
                        if dx * dx + dy * dy <= 64.0 * 64.0 {
                            inside += 1;
                        }
                    }
                }
                if inside as f64 >= cov * (size * size) as f64 {
                    expect.push((tx * size, ty * size));
                }
            }
        }
        assert_eq!(
            patch_grid(&img, size, cov),
            expect,
            "size {size} coverage {cov}"
        );
    }
}

#[test]
fn recount_of_a_two_setting_corpus() {
    let frames = corpus(100, 10, 1, &["a", "b"], 3);
    assert_eq!(group_keys(&frames, SplitMode::Cs1).len(), 10);
    let s = split(&frames, SplitMode::Cs1, FRACTIONS, 0).unwrap();
    // five videos per setting: 3 / 1 / 1 each
    assert_eq!(
        (s.train.len(), s.validation.len(), s.test.len()),
        (60, 20, 20)
    );
    assert!(s.warnings.is_empty());
    for part in [&s.train, &s.validation, &s.test] {
        let a = part
            .iter()
            .filter(|f| f.setting.as_deref() == Some("a"))
            .count();
        assert_eq!(a * 2, part.len());
    }
}

#[test]
fn split_is_seeded() {
    let frames = corpus(40, 2, 2, &[], 1);
    let ids = |seed| {
        split(&frames, SplitMode::Cs1, FRACTIONS, seed)
            .unwrap()
            .test
            .iter()
            .map(|f| f.id.clone())
            .collect::<Vec<_>>()
    };
    assert_eq!(ids(5), ids(5));
    assert!((0..10).any(|s| ids(s) != ids(5)));
}

#[test]
fn syn_partners_are_aligned() {
    let c = synthesize_corpus(
        &CorpusConfig {
            frames: 3,
            ..Default::default()
        },
        2,
    )
    .unwrap();
    let ds = build_target_domain(
        Domain::Syn,
        DomainSources {
            frames: &c.hr,
            layout: Some(&c.layout),
            noise: None,
        },
        32,
        0.99,
    )
    .unwrap();
    assert_eq!(ds.len(), 12);
    for p in &ds.patches {
        let hr = c.hr.iter().find(|f| f.id == p.frame_id).unwrap();
        let lr = synthesize_lr(&hr.image, &c.layout, &mut NoiseModel::noiseless()).unwrap();
        assert_eq!(
            p.paired.as_ref().unwrap(),
            &lr.crop(p.x, p.y, 32, 32).unwrap()
        );
        assert_eq!(p.image, hr.image.crop(p.x, p.y, 32, 32).unwrap());
    }
}

#[test]
fn input_patches_carry_cropped_layouts() {
    let c = synthesize_corpus(
        &CorpusConfig {
            frames: 1,
            ..Default::default()
        },
        4,
    )
    .unwrap();
    let patches = extract_input_patches(&c.lr[0], &c.layout, 32, 0.99).unwrap();
    assert_eq!(patches.len(), 4);
    let total: usize = patches
        .iter()
        .map(|p| p.layout.as_ref().unwrap().fibre_count())
        .sum();
    // fibres are kept by centre, so crops never double count
    assert!(total <= c.layout.fibre_count() && total * 10 >= c.layout.fibre_count() * 9);
    for p in &patches {
        assert_eq!(p.layout.as_ref().unwrap().dims(), (32, 32));
    }
}

#[test]
fn nat_domain_normalises_constant_frames_to_half() {
    let f = Frame::new(
        "n",
        Image::filled(64, 64, 0.8).with_fov(Some(FieldOfView::inscribed(64, 64))),
        "v",
        "p",
        None,
        Role::Natural,
    )
    .unwrap();
    let ds = build_target_domain(
        Domain::Nat,
        DomainSources {
            frames: std::slice::from_ref(&f),
            layout: None,
            noise: None,
        },
        16,
        0.99,
    )
    .unwrap();
    assert!(!ds.is_empty());
    for p in &ds.patches {
        assert!(p.image.data().iter().all(|&v| v == 0.5));
    }
    let n = normalize_frame(&f.image).unwrap();
    assert_eq!(n.get(0, 0), 0.0);
}

#[test]
fn res_domain_needs_room() {
    let frames = corpus(2, 1, 1, &[], 0);
    let r = build_target_domain(
        Domain::Res,
        DomainSources {
            frames: &frames,
            layout: None,
            noise: None,
        },
        8,
        0.99,
    );
    assert!(r.is_err());
}

fn check_split(frames: &[Frame], mode: SplitMode, seed: u64) -> std::result::Result<(), String> {
    let s = split(frames, mode, FRACTIONS, seed).map_err(|e| e.to_string())?;
    let parts = [&s.train, &s.validation, &s.test];
    let keys: Vec<BTreeSet<String>> = parts.iter().map(|p| group_keys(p, mode)).collect();
    for i in 0..3 {
        for j in i + 1..3 {
            if !keys[i].is_disjoint(&keys[j]) {
                return Err(format!("{mode:?}: groups shared by parts {i} and {j}"));
            }
        }
    }
    if parts.iter().map(|p| p.len()).sum::<usize>() != frames.len() {
        return Err("items lost".into());
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn no_group_leaks_across_parts(
        frames in 1usize..120,
        fpv in 1usize..6,
        vpp in 1usize..4,
        nset in 0usize..3,
        seed in any::<u64>(),
    ) {
        let settings = ["x", "y"];
        let fr = corpus(frames, fpv, vpp, &settings[..nset], seed % 1000);
        for mode in [SplitMode::Cs1, SplitMode::Cs2] {
            prop_assert!(check_split(&fr, mode, seed).is_ok());
        }
        // videos never straddle parts under the patient split either
        let s = split(&fr, SplitMode::Cs2, FRACTIONS, seed).unwrap();
        let v: Vec<_> = [&s.train, &s.validation, &s.test]
            .iter()
            .map(|p| group_keys(p, SplitMode::Cs1))
            .collect();
        prop_assert!(v[0].is_disjoint(&v[1]) && v[0].is_disjoint(&v[2]) && v[1].is_disjoint(&v[2]));
    }
}
