mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::*;
use dragedit_core::backend::{Denoiser, ToyDenoiser};
use dragedit_core::mask::{DragPair, Mask, PairingMap, Point};
use dragedit_core::tasks::{
    build_dragging, build_moving, build_pasting, downsample_masks, DragPointSet, EditRequest,
    EditSpec, Offset, TaskInput, TaskKind,
};
use dragedit_core::tensor::FeatureMap;
use ndarray::Array2;
use proptest::prelude::*;

fn boxed() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..=7, 1usize..=7).prop_flat_map(|(h, w)| (0..=N - h, 0..=N - w, Just(h), Just(w)))
}

fn cells(m: &Mask) -> BTreeSet<(usize, usize)> {
    m.cells().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn moving_masks_partition_the_grid(
        (y0, x0, h, w) in boxed(),
        dy in -15i64..=15,
        dx in -15i64..=15,
    ) {
        let obj = Mask::rect(N, N, y0, x0, y0 + h, x0 + w);
        let fits = y0 as i64 + dy >= 0 && (y0 + h) as i64 + dy <= N as i64
            && x0 as i64 + dx >= 0 && (x0 + w) as i64 + dx <= N as i64;
        let built = build_moving(&obj, Offset { dy, dx }, None);
        prop_assert_eq!(built.is_ok(), fits);
        let Ok(spec) = built else { return Ok(()) };
        let ipt = spec.m_ipt.as_ref().unwrap();
        for y in 0..N {
            for x in 0..N {
                let gud = y >= y0 && y < y0 + h && x >= x0 && x < x0 + w;
                let (sy, sx) = (y as i64 - dy, x as i64 - dx);
                let gen = sy >= y0 as i64 && sy < (y0 + h) as i64 && sx >= x0 as i64 && sx < (x0 + w) as i64;
                prop_assert_eq!(spec.m_gud.get(y, x), gud);
                prop_assert_eq!(spec.m_gen.get(y, x), gen);
                prop_assert_eq!(spec.m_share.get(y, x), !(gen || gud));
                prop_assert_eq!(ipt.get(y, x), gud && !gen);
            }
        }
        let reference = spec.m_ref.as_ref().unwrap();
        prop_assert!(reference.intersect(&spec.m_gen.union(&spec.m_gud)).is_empty());
    }

    #[test]
    fn downsample_matches_per_cell_majority(
        bits in proptest::collection::vec(any::<bool>(), N * N),
        factor in prop::sample::select(vec![1usize, 2, 4, 8]),
    ) {
        let m = Mask::from_fn(N, N, |y, x| bits[y * N + x]);
        let mut counts = vec![0usize; (N / factor) * (N / factor)];
        for (i, on) in bits.iter().enumerate() {
            if *on {
                let (y, x) = (i / N, i % N);
                counts[(y / factor) * (N / factor) + x / factor] += 1;
            }
        }
        let d = m.downsample(factor);
        prop_assert_eq!(d.dims(), (N / factor, N / factor));
        for (i, c) in counts.iter().enumerate() {
            let w = N / factor;
            prop_assert_eq!(d.get(i / w, i % w), 2 * c >= factor * factor);
        }
    }

    #[test]
    fn local_pairings_are_bijective(seed in any::<u64>(), pasting in any::<bool>()) {
        let mut r = rng(seed);
        let kind = if pasting { TaskKind::Pasting } else { TaskKind::Moving };
        let spec = random_spec(kind, &mut r);
        let pairs = spec.pairing.layer_pairs(&spec.m_gen, 1);
        let gen: BTreeSet<usize> = pairs.iter().map(|p| p.gen_token).collect();
        let gud: BTreeSet<(usize, usize)> = pairs
            .iter()
            .map(|p| {
                prop_assert_eq!(p.gud_cell.0.fract(), 0.0);
                prop_assert_eq!(p.gud_cell.1.fract(), 0.0);
                Ok((p.gud_cell.0 as usize, p.gud_cell.1 as usize))
            })
            .collect::<Result<_, _>>()?;
        prop_assert_eq!(gen.len(), pairs.len());
        prop_assert_eq!(gen, spec.m_gen.tokens().into_iter().collect::<BTreeSet<_>>());
        prop_assert_eq!(gud, cells(&spec.m_gud));
    }

    #[test]
    fn specs_round_trip_through_json(seed in any::<u64>(), k in 0usize..5) {
        let spec = random_spec(TaskKind::ALL[k], &mut rng(seed));
        let text = serde_json::to_string(&spec).unwrap();
        let back: EditSpec = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back, spec);
    }
}

#[test]
fn downsampled_layers_match_the_profile() {
    let b = ToyDenoiser::new(0);
    let mut r = rng(11);
    for kind in TaskKind::ALL {
        let spec = random_spec(kind, &mut r);
        let layers = downsample_masks(&spec, b.profile()).unwrap();
        assert_eq!(layers.len(), 4);
        for l in &layers {
            let s = b.profile().layer_pixel_scale(l.layer);
            assert_eq!(l.size, (N / s, N / s));
            assert_eq!(l.gen, spec.m_gen.downsample(s));
            assert_eq!(l.share, spec.m_share.downsample(s));
        }
        assert_eq!(layers[3].gen, spec.m_gen);
    }
    let small = build_moving(&Mask::rect(8, 8, 1, 1, 3, 3), Offset { dy: 3, dx: 0 }, None).unwrap();
    assert_eq!(downsample_masks(&small, b.profile()).unwrap_err().field(), Some("masks"));
}

/// Patch cells that survive symmetric clipping, enumerated directly.
fn enumerate_patch(src: (i64, i64), dst: (i64, i64)) -> Vec<((usize, usize), (usize, usize))> {
    let inside = |y: i64, x: i64| (0..N as i64).contains(&y) && (0..N as i64).contains(&x);
    let mut out = Vec::new();
    for dy in -1..=1 {
        for dx in -1..=1 {
            let (sy, sx, ty, tx) = (src.0 + dy, src.1 + dx, dst.0 + dy, dst.1 + dx);
            if inside(sy, sx) && inside(ty, tx) {
                out.push(((sy as usize, sx as usize), (ty as usize, tx as usize)));
            }
        }
    }
    out
}

#[test]
fn overlapping_drag_destinations_use_union_semantics() {
    let first = DragPair {
        src: Point { y: 2, x: 2 },
        dst: Point { y: 6, x: 6 },
    };
    let mut overlapping = 0;
    for y in 0..N as i64 {
        for x in 0..N as i64 {
            let second = DragPair {
                src: Point { y: 12, x: 12 },
                dst: Point { y, x },
            };
            let spec = build_dragging(&DragPointSet {
                points: vec![first, second],
                share: Mask::full(N, N),
            })
            .unwrap();
            let patches = [
                enumerate_patch((2, 2), (6, 6)),
                enumerate_patch((12, 12), (y, x)),
            ];
            let gud: BTreeSet<_> = patches.iter().flatten().map(|p| p.0).collect();
            let gen: BTreeSet<_> = patches.iter().flatten().map(|p| p.1).collect();
            assert_eq!(cells(&spec.m_gud), gud);
            assert_eq!(cells(&spec.m_gen), gen);
            let total: usize = patches.iter().map(Vec::len).sum();
            if gen.len() < total {
                overlapping += 1;
            }
            let PairingMap::Points { patches: got } = &spec.pairing else {
                panic!("dragging pairs per point")
            };
            for (p, want) in got.iter().zip(&patches) {
                let have: Vec<_> = p.src_cells().zip(p.dst_cells()).collect();
                assert_eq!(&have, want);
            }
            // at full resolution every pair reads the guided cell it came from
            let mut expected: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
            for (s, d) in patches.iter().flatten() {
                expected.entry(d.0 * N + d.1).or_default().push(*s);
            }
            let mut actual: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
            for c in spec.pairing.layer_pairs(&spec.m_gen, 1) {
                actual
                    .entry(c.gen_token)
                    .or_default()
                    .push((c.gud_cell.0 as usize, c.gud_cell.1 as usize));
            }
            assert_eq!(actual, expected);
        }
    }
    assert_eq!(overlapping, 25);
}

#[test]
fn shrunk_features_are_zero_outside_the_source_window() {
    let data = Array2::from_shape_fn((64, 3), |(i, c)| 1.0 + (i * 3 + c) as f64 * 0.01);
    let f = FeatureMap {
        height: 8,
        width: 8,
        data,
    };
    let out = f.scale_about((4.0, 4.0), 0.5);
    for y in 0..8 {
        for x in 0..8 {
            let inside = (2..6).contains(&y) && (2..6).contains(&x);
            let row = out.at(y, x);
            if inside {
                assert!(row.iter().all(|v| *v > 0.9), "({y},{x})");
            } else {
                assert!(row.iter().all(|v| *v == 0.0), "({y},{x})");
            }
        }
    }
    // cell (2,2) samples the source at (0.5, 0.5): mean of the top-left four cells
    let expected: Vec<f64> = (0..3)
        .map(|c| [0, 1, 8, 9].iter().map(|i| f.data[[*i, c]]).sum::<f64>() / 4.0)
        .collect();
    for c in 0..3 {
        assert!((out.at(2, 2)[c] - expected[c]).abs() < 1e-12);
    }
}

#[test]
fn pasting_requires_a_translated_copy() {
    let a = Mask::rect(N, N, 1, 1, 4, 4);
    let spec = build_pasting(&a, &a.translate(6, 7).unwrap()).unwrap();
    assert!(spec.uses_reference_image);
    assert_eq!(spec.pairing, PairingMap::Translation { dy: 6.0, dx: 7.0 });
    let err = build_pasting(&a, &Mask::rect(N, N, 1, 1, 4, 5)).unwrap_err();
    assert_eq!(err.field(), Some("target_mask"));
    let flipped = Mask::from_fn(N, N, |y, x| match y {
        8 => (6..9).contains(&x),
        9 => (6..8).contains(&x),
        10 => (6..10).contains(&x),
        _ => false,
    });
    assert_eq!(flipped.count(), 9);
    assert_eq!(build_pasting(&a, &flipped).unwrap_err().field(), Some("target_mask"));
}

#[test]
fn requests_round_trip_and_check_versions() {
    let obj = Mask::rect(N, N, 2, 2, 6, 6);
    let inputs = vec![
        TaskInput::Moving {
            object_mask: obj.clone(),
            offset: Offset { dy: 3, dx: -1 },
            reference_region: None,
        },
        TaskInput::Resizing {
            object_mask: obj.clone(),
            gamma: 1.5,
            offset: Offset::default(),
            reference_region: Some(Mask::rect(N, N, 10, 10, 14, 14)),
        },
        TaskInput::Replacing {
            object_mask: obj.clone(),
            reference_mask: Mask::rect(N, N, 8, 8, 11, 12),
        },
        TaskInput::Pasting {
            reference_mask: obj.clone(),
            target_mask: obj.translate(5, 5).unwrap(),
        },
        TaskInput::Dragging {
            points: vec![DragPair {
                src: Point { x: 3, y: 3 },
                dst: Point { x: 9, y: 4 },
            }],
            share_mask: obj.complement(),
        },
    ];
    for (input, kind) in inputs.into_iter().zip(TaskKind::ALL) {
        let req = EditRequest::new(input);
        assert_eq!(req.kind(), kind);
        let text = serde_json::to_string(&req).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["kind"], serde_json::to_value(kind).unwrap());
        assert_eq!(value["v"], 1);
        let back = EditRequest::from_json(&text).unwrap();
        assert_eq!(back, req);
        assert_eq!(back.build().unwrap().kind, kind);
        let mut bumped = value.clone();
        bumped["v"] = 2.into();
        let err = EditRequest::from_json(&bumped.to_string()).unwrap_err();
        assert_eq!(err.field(), Some("v"));
    }
}

#[test]
fn request_masks_must_be_png() {
    let text = r#"{"v":1,"kind":"replacing","object_mask":"not base64","reference_mask":"x"}"#;
    assert_eq!(EditRequest::from_json(text).unwrap_err().field(), Some("request"));
}
