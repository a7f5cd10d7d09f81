mod common;

use autolabel_core::bbox::Dims;
use autolabel_core::geometry::{lift_depth, rotation_about_y, CameraIntrinsics, Vec3};
use autolabel_core::io::{read_labels, read_sequence, frame_file_name};
use autolabel_core::refine::{silhouette_parts, Part};
use autolabel_core::synth::{generate_scene, write_bundle, CarSpec, EgoSpec, OccluderSpec, SceneSpec};
use autolabel_core::Box3D;
use common::{part_surface_distance, ray_part_hit};

fn car(position: [f64; 2], yaw: f64) -> CarSpec {
    CarSpec {
        dims: Dims::new(4.1, 1.75, 1.5),
        position,
        yaw,
        speed: 0.0,
        yaw_rate: 0.0,
    }
}

fn small_scene(cars: Vec<CarSpec>, occluders: Vec<OccluderSpec>, frames: u32) -> SceneSpec {
    SceneSpec {
        seed: 21,
        frames,
        width: 400,
        height: 150,
        intrinsics: CameraIntrinsics::new(240.0, 240.0, 200.0, 75.0).unwrap(),
        camera_height: 1.65,
        ego: EgoSpec {
            waypoints: vec![[0.0, 0.0], [1.0, 30.0]],
            speed: 3.0,
        },
        cars,
        occluders,
        depth_noise: 0.0,
        outlier_fraction: 0.0,
        min_visible_pixels: 10,
    }
}

/// Parts of car `i` and the world-to-local map at `frame`.
fn local_frame(spec: &SceneSpec, i: usize, frame: u32) -> (Vec<Part>, impl Fn(&Vec3) -> Vec3) {
    let c = &spec.cars[i];
    let (x, z, yaw) = spec.car_state(c, frame);
    let rt = rotation_about_y(yaw).transpose();
    let origin = Vec3::new(x, spec.camera_height, z);
    (silhouette_parts(c.dims, true), move |p: &Vec3| rt * (p - origin))
}

#[test]
fn noiseless_lifted_points_lie_on_car_surfaces() {
    // Depth is stored as f32; below 16 m its rounding stays under 1e-6 m.
    let spec = small_scene(vec![car([2.5, 9.0], 0.4), car([-3.0, 12.5], 1.9)], vec![], 3);
    let bundle = generate_scene(&spec).unwrap();
    let mut checked = 0;
    for (f, frame) in bundle.sequence.frames.iter().enumerate() {
        let cloud = lift_depth(&frame.depth, &frame.intrinsics);
        let pixels = cloud.pixels.as_ref().unwrap();
        for (p, &(u, v)) in cloud.points.iter().zip(pixels) {
            let id = frame.mask.id_at(u, v);
            if id == 0 {
                continue;
            }
            let (parts, to_local) = local_frame(&spec, id as usize - 1, f as u32);
            let q = to_local(&frame.pose.to_world(p));
            let surface = parts.iter().map(|part| part_surface_distance(part, &q).0).fold(f64::INFINITY, f64::min);
            assert!(surface <= 1e-6, "pixel ({u},{v}) is {surface:e} m off the surface");
            for part in &parts {
                let (d, inside) = part_surface_distance(part, &q);
                assert!(!inside || d <= 1e-6, "pixel ({u},{v}) lands {d} m inside a part");
            }
            checked += 1;
        }
    }
    assert!(checked > 2000, "only {checked} instance pixels");
}

#[test]
fn mask_and_clean_depth_agree_with_ray_casting() {
    let occ = OccluderSpec {
        min: [-0.5, -1.0, 6.0],
        max: [0.5, 1.65, 6.4],
    };
    let spec = SceneSpec {
        depth_noise: 0.2,
        outlier_fraction: 0.1,
        ..small_scene(vec![car([2.5, 9.0], 0.4), car([-1.0, 14.0], -0.3), car([0.3, 24.0], 1.2)], vec![occ], 2)
    };
    let bundle = generate_scene(&spec).unwrap();
    let k = spec.intrinsics;
    for (f, frame) in bundle.sequence.frames.iter().enumerate() {
        let cam = frame.pose;
        let locals: Vec<_> = (0..spec.cars.len()).map(|i| local_frame(&spec, i, f as u32)).collect();
        let clean = &bundle.clean_depth[f];
        for v in 0..spec.height {
            for u in 0..spec.width {
                let dir_cam = Vec3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
                let cam_origin = *cam.translation();
                let dir_world = cam.rotation() * dir_cam;
                let hits: Vec<Option<f64>> = locals
                    .iter()
                    .map(|(parts, to_local)| {
                        let o = to_local(&cam_origin);
                        let d = to_local(&(cam_origin + dir_world)) - o;
                        parts.iter().filter_map(|p| ray_part_hit(&o, &d, p)).fold(None, |a: Option<f64>, t| Some(a.map_or(t, |a| a.min(t))))
                    })
                    .collect();
                let id = frame.mask.id_at(u, v);
                let depth = clean.get(u, v) as f64;
                let noisy = frame.depth.get(u, v);
                if id > 0 {
                    let t = hits[id as usize - 1].expect("instance pixel must hit its car");
                    assert!((depth - t).abs() <= 1e-6 * t, "({u},{v}) depth {depth} vs hit {t}");
                    for (j, h) in hits.iter().enumerate() {
                        if let Some(h) = h {
                            assert!(*h >= t - 1e-6 * t, "car {} is nearer than car {id} at ({u},{v})", j + 1);
                        }
                    }
                } else {
                    assert_eq!(noisy, clean.get(u, v), "background pixel ({u},{v}) got noise");
                    for h in hits.iter().flatten() {
                        assert!(depth > 0.0 && *h >= depth - 1e-6 * depth, "car visible behind background at ({u},{v})");
                    }
                }
            }
        }
    }
}

#[test]
fn occluder_hides_a_car_completely() {
    // A wall between the camera and the car covers it in every frame.
    let wall = OccluderSpec {
        min: [-6.0, -3.0, 7.0],
        max: [6.0, 1.65, 7.5],
    };
    let spec = small_scene(vec![car([0.0, 15.0], 0.0)], vec![wall], 3);
    let bundle = generate_scene(&spec).unwrap();
    for (f, frame) in bundle.sequence.frames.iter().enumerate() {
        assert!(frame.mask.ids().iter().all(|&id| id == 0));
        assert!(frame.mask.instances().is_empty());
        assert!(bundle.ground_truth[f].is_empty());
    }
}

#[test]
fn written_bundle_reads_back_with_parseable_ground_truth() {
    let spec = small_scene(vec![car([2.5, 9.0], 0.4), car([-3.0, 12.5], 1.9)], vec![], 4);
    let bundle = generate_scene(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_bundle(&bundle, dir.path()).unwrap();
    assert_eq!(read_sequence(dir.path()).unwrap(), bundle.sequence);
    for (f, gt) in bundle.ground_truth.iter().enumerate() {
        let recs = read_labels(dir.path().join("label").join(frame_file_name(f as u32, "txt"))).unwrap();
        assert_eq!(recs.len(), gt.len());
        for (rec, g) in recs.iter().zip(gt) {
            let b = Box3D::from_label(rec, f as u32);
            assert!((b.center - g.center).amax() < 0.011);
            assert!(rec.bbox[2] > rec.bbox[0] && rec.bbox[3] > rec.bbox[1]);
        }
    }
}

#[test]
fn ground_truth_box_encloses_the_rendered_surface() {
    let spec = small_scene(vec![car([1.5, 10.0], 2.6)], vec![], 1);
    let bundle = generate_scene(&spec).unwrap();
    let frame = &bundle.sequence.frames[0];
    let gt = &bundle.ground_truth[0][0];
    let cloud = lift_depth(&frame.depth, &frame.intrinsics);
    let pixels = cloud.pixels.as_ref().unwrap();
    let mut n = 0;
    for (p, &(u, v)) in cloud.points.iter().zip(pixels) {
        if frame.mask.id_at(u, v) == 1 {
            let mut grown = gt.clone();
            grown.dims = Dims::new(gt.dims.length + 1e-5, gt.dims.width + 1e-5, gt.dims.height + 1e-5);
            assert!(common::inside(&grown, p, false));
            n += 1;
        }
    }
    assert!(n > 100);
}
