mod common;

use autolabel_core::bbox::Dims;
use autolabel_core::geometry::{rotation_about_y, CameraIntrinsics, PointCloud, Vec3};
use autolabel_core::io::InstanceMaskFrame;
use autolabel_core::lomm::{aggregate_stationary, classify, motion_stats_from_locations, LommConfig};
use autolabel_core::synth::{generate_scene, CarSpec, EgoSpec, SceneSpec};
use autolabel_core::tracker::{associate_frame, instance_location, predict_location, track_sequence, InstanceTrack, MotionClass, TrackerConfig};
use common::{gauss, rng, track_from_locations};
use proptest::prelude::*;
use rand::Rng;

fn parked(position: [f64; 2], yaw: f64) -> CarSpec {
    CarSpec {
        dims: Dims::new(4.2, 1.8, 1.5),
        position,
        yaw,
        speed: 0.0,
        yaw_rate: 0.0,
    }
}

fn scene(cars: Vec<CarSpec>, waypoints: Vec<[f64; 2]>, frames: u32, noise: f64) -> SceneSpec {
    SceneSpec {
        seed: 4,
        frames,
        width: 620,
        height: 188,
        intrinsics: CameraIntrinsics::new(375.0, 375.0, 310.0, 94.0).unwrap(),
        camera_height: 1.65,
        ego: EgoSpec { waypoints, speed: 5.0 },
        cars,
        occluders: vec![],
        depth_noise: noise,
        outlier_fraction: 0.0,
        min_visible_pixels: 10,
    }
}

fn window(n: usize) -> TrackerConfig {
    TrackerConfig {
        frames_before: n,
        frames_after: n,
        ..TrackerConfig::default()
    }
}

fn assert_partial_matching(tracks: &[InstanceTrack]) {
    for t in tracks {
        assert!(!t.entries.is_empty());
        assert!(t.entries.windows(2).all(|w| w[0].frame < w[1].frame));
        assert!(t.entries.iter().all(|e| !e.points.is_empty()));
    }
}

#[test]
fn parked_car_seen_in_every_frame_is_one_track() {
    let spec = scene(vec![parked([1.5, 14.0], 0.3)], vec![[0.0, 0.0], [0.0, 50.0]], 11, 0.05);
    let bundle = generate_scene(&spec).unwrap();
    let tracks = track_sequence(&bundle.sequence, 5, &window(5), 400);
    assert_eq!(tracks.len(), 1);
    assert_eq!(tracks[0].entries.len(), 11);
    assert_partial_matching(&tracks);
    // Locations expressed in the reference camera agree across frames.
    let r = tracks[0].entry_at(5).unwrap().location;
    for e in &tracks[0].entries {
        assert!((e.location - r).norm() < 0.6, "frame {} at {:?}", e.frame, e.location);
    }
}

#[test]
fn two_separated_cars_keep_their_identities() {
    let spec = scene(vec![parked([-5.0, 15.0], 0.0), parked([5.0, 22.0], 1.0)], vec![[0.0, 0.0], [0.0, 50.0]], 11, 0.05);
    let bundle = generate_scene(&spec).unwrap();
    let tracks = track_sequence(&bundle.sequence, 5, &window(5), 400);
    assert_eq!(tracks.len(), 2);
    assert_partial_matching(&tracks);
    for t in &tracks {
        let id = t.entries[0].instance_id;
        assert!(t.entries.iter().all(|e| e.instance_id == id));
    }
}

#[test]
fn one_missed_frame_splits_the_track() {
    let spec = scene(vec![parked([1.5, 14.0], 0.3)], vec![[0.0, 0.0], [0.0, 50.0]], 11, 0.05);
    let mut bundle = generate_scene(&spec).unwrap();
    let f = &mut bundle.sequence.frames[7];
    f.mask = InstanceMaskFrame::empty(spec.width, spec.height);
    let tracks = track_sequence(&bundle.sequence, 5, &window(5), 400);
    assert_eq!(tracks.len(), 2);
    let lens: Vec<usize> = tracks.iter().map(|t| t.entries.len()).collect();
    assert_eq!(lens, vec![7, 3]);
}

#[test]
fn vanishing_gate_opens_a_track_per_detection() {
    let spec = scene(vec![parked([-3.0, 12.0], 0.0), parked([4.0, 18.0], 1.0)], vec![[0.0, 0.0], [0.0, 50.0]], 7, 0.05);
    let bundle = generate_scene(&spec).unwrap();
    let cfg = TrackerConfig {
        gate_distance: 1e-9,
        ..window(3)
    };
    let tracks = track_sequence(&bundle.sequence, 3, &cfg, 400);
    let detections: usize = bundle.sequence.frames.iter().map(|f| f.mask.instances().len()).sum();
    assert_eq!(tracks.len(), detections);
}

#[test]
fn median_location_ignores_a_far_outlier() {
    let mut r = rng(8);
    let centre = Vec3::new(2.0, 1.0, 10.0);
    let mut pts: Vec<Vec3> = (0..999).map(|_| centre + Vec3::new(gauss(&mut r, 0.3), gauss(&mut r, 0.3), gauss(&mut r, 0.3))).collect();
    pts.push(centre + Vec3::new(0.0, 0.0, 50.0));
    let loc = instance_location(&PointCloud::from_points(pts)).unwrap();
    assert!((loc - centre).norm() < 0.1);
}

/// Mutual nearest neighbours under the gate, by checking every pair.
fn brute_force_pairs(preds: &[(usize, Vec3)], dets: &[Vec3], gate: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (ti, (tid, p)) in preds.iter().enumerate() {
        for (di, d) in dets.iter().enumerate() {
            let dist = (p - d).norm();
            let track_best = preds.iter().all(|(oid, q)| {
                let o = (q - d).norm();
                o > dist || (o == dist && oid >= tid)
            });
            let det_best = dets.iter().enumerate().all(|(oj, e)| {
                let o = (p - e).norm();
                o > dist || (o == dist && oj >= di)
            });
            if track_best && det_best && dist < gate {
                out.push((ti, di));
            }
        }
    }
    out.sort_by_key(|&(_, d)| d);
    out
}

#[test]
fn association_matches_brute_force() {
    let preds = vec![(0, Vec3::new(0.0, 0.0, 10.0)), (1, Vec3::new(0.0, 0.0, 12.0))];
    let dets = vec![Vec3::new(0.0, 0.0, 11.2), Vec3::new(0.0, 0.0, 9.9)];
    let a = associate_frame(&preds, &dets, 3.0);
    assert_eq!(a.matches, vec![(1, 0), (0, 1)]);

    let mut r = rng(2);
    for _ in 0..2000 {
        let nt = r.gen_range(0..5);
        let nd = r.gen_range(0..5);
        let pt = |r: &mut rand_chacha::ChaCha8Rng| Vec3::new(r.gen_range(-5.0..5.0f64).round(), 0.0, r.gen_range(-5.0..5.0f64).round());
        let preds: Vec<(usize, Vec3)> = (0..nt).map(|i| (i, pt(&mut r))).collect();
        let dets: Vec<Vec3> = (0..nd).map(|_| pt(&mut r)).collect();
        let gate = r.gen_range(0.5..6.0);
        let a = associate_frame(&preds, &dets, gate);
        assert_eq!(a.matches, brute_force_pairs(&preds, &dets, gate));
        let matched: Vec<usize> = a.matches.iter().map(|m| m.1).collect();
        let mut all: Vec<usize> = matched.iter().chain(&a.unmatched).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..nd).collect::<Vec<_>>());
        let mut tracks: Vec<usize> = a.matches.iter().map(|m| m.0).collect();
        tracks.dedup();
        assert_eq!(tracks.len(), a.matches.len());
    }
}

#[test]
fn aggregated_points_stay_near_the_surface() {
    let spec = scene(vec![parked([2.0, 12.0], 0.5)], vec![[0.0, 0.0], [0.0, 50.0]], 11, 0.05);
    let bundle = generate_scene(&spec).unwrap();
    let tracks = track_sequence(&bundle.sequence, 5, &window(5), 100_000);
    assert_eq!(tracks.len(), 1);
    let total: usize = tracks[0].entries.iter().map(|e| e.points.len()).sum();
    let cloud = aggregate_stationary(&tracks[0]);
    assert_eq!(cloud.len(), total);
    let frames = cloud.frames.as_ref().unwrap();
    assert_eq!(frames.iter().filter(|&&f| f == 0).count(), tracks[0].entries[0].points.len());

    let pose = bundle.sequence.frames[5].pose;
    let (x, z, yaw) = spec.car_state(&spec.cars[0], 5);
    let rt = rotation_about_y(yaw).transpose();
    let parts = autolabel_core::refine::silhouette_parts(spec.cars[0].dims, true);
    for p in &cloud.points {
        let q = rt * (pose.to_world(p) - Vec3::new(x, spec.camera_height, z));
        let d = parts.iter().map(|part| common::part_surface_distance(part, &q).0).fold(f64::INFINITY, f64::min);
        assert!(d < 0.3, "point {d} m from the surface");
    }
}

#[test]
fn aggregation_recovers_a_face_hidden_in_the_reference_frame() {
    // Car straight ahead, length along the road: from the start only its
    // rear is visible; the ego then changes lane and sees one side.
    let spec = scene(vec![parked([0.0, 18.0], std::f64::consts::FRAC_PI_2)], vec![[0.0, 0.0], [0.0, 3.0], [2.5, 9.0], [2.5, 30.0]], 21, 0.02);
    let bundle = generate_scene(&spec).unwrap();
    let cfg = TrackerConfig {
        frames_before: 0,
        frames_after: 20,
        ..TrackerConfig::default()
    };
    let tracks = track_sequence(&bundle.sequence, 0, &cfg, 100_000);
    assert_eq!(tracks.len(), 1);
    let pose = bundle.sequence.frames[0].pose;
    let (x, z, yaw) = spec.car_state(&spec.cars[0], 0);
    let rt = rotation_about_y(yaw).transpose();
    let (l, w) = (spec.cars[0].dims.length, spec.cars[0].dims.width);
    let on_side = |pts: &PointCloud| {
        pts.points
            .iter()
            .map(|p| rt * (pose.to_world(p) - Vec3::new(x, spec.camera_height, z)))
            .filter(|q| (q.z.abs() - w / 2.0).abs() < 0.08 && q.x > 0.2 - l / 2.0 && q.y > -0.5)
            .count()
    };
    assert_eq!(on_side(&tracks[0].entries[0].points), 0);
    assert!(on_side(&aggregate_stationary(&tracks[0])) > 50);
}

fn jittered(seed: u64, n: usize, step: Vec3) -> Vec<Vec3> {
    let mut r = rng(seed);
    (0..n).map(|i| step * i as f64 + Vec3::new(gauss(&mut r, 0.15), gauss(&mut r, 0.15), gauss(&mut r, 0.15))).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn constant_velocity_prediction_is_exact(v in prop::array::uniform3(-40.0..40.0f64), start in prop::array::uniform3(-100.0..100.0f64), n in 2usize..8) {
        let (v, s) = (Vec3::from(v), Vec3::from(start));
        let locs: Vec<Vec3> = (0..n).map(|i| s + v * i as f64).collect();
        let pred = predict_location(&track_from_locations(&locs));
        prop_assert!((pred - (s + v * n as f64)).norm() <= 1e-9);
    }

    #[test]
    fn motion_ratio_ignores_rotation_and_scale(seed in any::<u64>(), angle in -3.0..3.0f64, s in 0.1..10.0f64, speed in 0.0..0.5f64) {
        let locs = jittered(seed, 30, Vec3::new(speed, 0.0, speed / 2.0));
        let base = motion_stats_from_locations(&locs).unwrap();
        let r = rotation_about_y(angle);
        let rotated: Vec<Vec3> = locs.iter().map(|p| r * p).collect();
        let rs = motion_stats_from_locations(&rotated).unwrap();
        prop_assert!((rs.z_ratio - base.z_ratio).abs() <= 1e-9 * base.z_ratio.max(1.0));
        let scaled: Vec<Vec3> = locs.iter().map(|p| p * s).collect();
        let ss = motion_stats_from_locations(&scaled).unwrap();
        prop_assert!((ss.z_ratio - base.z_ratio).abs() <= 1e-9 * base.z_ratio.max(1.0));
        prop_assert!((ss.net_distance - s * base.net_distance).abs() <= 1e-9 * s * base.net_distance.max(1.0));
        prop_assert!((ss.mu - base.mu * s).norm() <= 1e-9 * s);
        prop_assert!((ss.sigma - base.sigma * s).norm() <= 1e-9 * s);
    }

    #[test]
    fn classification_is_monotone(seed in any::<u64>(), dz in 0.0..5.0f64, dn in 0.0..20.0f64) {
        let base = motion_stats_from_locations(&jittered(seed, 20, Vec3::new(0.3, 0.0, 0.0))).unwrap();
        let cfg = LommConfig::default();
        let mut more = base;
        more.z_ratio += dz;
        more.net_distance += dn;
        if classify(&base, &cfg) == MotionClass::Moving {
            prop_assert_eq!(classify(&more, &cfg), MotionClass::Moving);
        }
    }
}
