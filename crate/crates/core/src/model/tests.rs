use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::image::ImageBuffer;
use crate::raster::{render, render_backward, render_view, RenderSettings};
use crate::testing::{central_difference, front_camera, grad_close, randomize_networks, tiny_config};

fn two_anchor_scene(seed: u64) -> NeuralScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = vec![Vec3::new(-0.15, 0.05, 0.1), Vec3::new(0.2, -0.1, -0.12)];
    let mut scene = NeuralScene::from_points(&points, tiny_config(), &mut rng).unwrap();
    randomize_networks(&mut scene, &mut rng, 0.5);
    scene
}

#[test]
fn zero_output_layers_give_anchor_defaults() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let points: Vec<Vec3> = (0..6).map(|_| Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0))).collect();
    let scene = NeuralScene::from_points(&points, tiny_config(), &mut rng).unwrap();
    let (f_h, _) = scene.features(1, BnMode::Train).unwrap();
    let cam = front_camera(4.0, 20.0, 16);
    let (gs, cache) = scene.decode_view(&f_h, &cam);
    assert_eq!(gs.len(), 18);
    let log_s = scene.store.get(scene.anchors.log_offset_scales);
    for (g, r) in gs.iter().zip(cache.slots()) {
        let i = r.anchor as usize * 3 + r.slot as usize;
        assert_eq!(g.opacity(), 0.5);
        assert_eq!(g.rotation, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(g.color, [0.5; 3]);
        assert_eq!(g.log_scale, Vec3::new(log_s[i * 3], log_s[i * 3 + 1], log_s[i * 3 + 2]));
        let expected = spawn_oracle(&scene, r.anchor as usize, r.slot as usize);
        assert!((g.mean - expected).norm() < 1e-15);
    }
}

fn spawn_oracle(scene: &NeuralScene, a: usize, s: usize) -> Vec3 {
    let o = scene.store.get(scene.anchors.offsets);
    let l = scene.store.get(scene.anchors.log_anchor_scale)[a].exp();
    let i = (a * scene.config.k + s) * 3;
    scene.positions[a] + Vec3::new(o[i] * l, o[i + 1] * l, o[i + 2] * l)
}

#[test]
fn same_camera_center_same_gaussians() {
    let scene = two_anchor_scene(2);
    let (f_h, _) = scene.features(2, BnMode::Eval).unwrap();
    let a = Camera::look_at(&Vec3::new(0.0, -3.0, 0.0), &Vec3::zeros(), &Vec3::z(), 20.0, 20.0, 16, 16).unwrap();
    let b = Camera::look_at(&Vec3::new(0.0, -3.0, 0.0), &Vec3::new(0.3, 0.0, 0.1), &Vec3::z(), 25.0, 25.0, 32, 32).unwrap();
    assert_eq!(scene.decode_view(&f_h, &a).0, scene.decode_view(&f_h, &b).0);
}

fn probe_loss(scene: &NeuralScene, cam: &Camera, w: &ImageBuffer, active: usize) -> f64 {
    let (f_h, _) = scene.features(active, BnMode::Train).unwrap();
    let (gs, _) = scene.decode_view(&f_h, cam);
    let out = render_view(&gs, cam);
    out.color.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for seed in [3, 4] {
        let scene = two_anchor_scene(seed);
        let cam = front_camera(1.2, 14.0, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
        let w = ImageBuffer::from_fn(16, 16, |_, _, _| rng.gen_range(-1.0..1.0));

        let (f_h, hde) = scene.features(2, BnMode::Train).unwrap();
        let (gs, cache) = scene.decode_view(&f_h, &cam);
        let (_, state) = render(&gs, &cam, &RenderSettings::default());
        let rg = render_backward(&gs, &cam, &state, &w).unwrap();
        let mut grads = Grads::zeros_like(&scene.store);
        let d_fh = scene.view_backward(&cache, &rg, &mut grads);
        scene.structural_backward(&hde, &d_fh, &mut grads);

        let mut checked = 0;
        for id in scene.store.ids() {
            let t = scene.store.tensor(id);
            if !t.group.learnable() {
                continue;
            }
            for j in 0..t.data.len() {
                let fd = central_difference(1e-6, |h| {
                    let mut s = scene.clone();
                    s.store.get_mut(id)[j] += h;
                    probe_loss(&s, &cam, &w, 2)
                });
                let a = grads.get(id)[j];
                assert!(grad_close(a, fd, 1e-3, 1e-6), "{}[{j}]: {a} vs {fd}", t.name);
                checked += 1;
            }
        }
        assert!(checked > 500);
    }
}

#[test]
fn removing_all_slots_of_an_anchor_drops_it() {
    let mut scene = two_anchor_scene(5);
    let before = scene.store.get(scene.anchors.feature)[2..].to_vec();
    let dead = [
        SlotRef { anchor: 0, slot: 0 },
        SlotRef { anchor: 0, slot: 1 },
        SlotRef { anchor: 0, slot: 2 },
        SlotRef { anchor: 1, slot: 1 },
    ];
    let (keep, removed) = scene.remove_slots(&dead).unwrap();
    assert_eq!(keep, vec![false, true]);
    assert_eq!(removed, 1);
    assert_eq!(scene.anchor_count(), 1);
    assert_eq!(scene.live_slot_count(), 2);
    assert_eq!(scene.store.get(scene.anchors.feature), before.as_slice());
    let (f_h, _) = scene.features(2, BnMode::Train).unwrap();
    let (gs, _) = scene.decode_view(&f_h, &front_camera(2.0, 10.0, 8));
    assert_eq!(gs.len(), 2);
}

#[test]
fn no_removal_keeps_scene() {
    let mut scene = two_anchor_scene(6);
    let copy = scene.clone();
    let (keep, removed) = scene.remove_slots(&[]).unwrap();
    assert_eq!(keep, vec![true, true]);
    assert_eq!(removed, 0);
    assert_eq!(scene, copy);
}

#[test]
fn normalization_ignores_far_outliers() {
    let mut pts: Vec<Vec3> = (0..50).map(|i| Vec3::new((i % 5) as f64, (i / 5 % 5) as f64, (i / 25) as f64) * 0.1).collect();
    pts.push(Vec3::new(30.0, 0.0, 0.0));
    let b = normalization_bounds(&pts).unwrap();
    assert!(b.aabb_max.x < 1.0);
    assert_eq!(b.centroid, SceneBounds::from_points(&pts).unwrap().centroid);
}
