mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use tilefuse::phantom::{Misalignment, PhantomSpec};
use tilefuse::registration::{estimate_affine, mean_corner_error, ncc, AffineTransform, RegistrationConfig};
use tilefuse::volume::{Grid, Volume};

fn phantom(seed: u64, m: Misalignment) -> (PhantomSpec, Volume) {
    let spec = PhantomSpec {
        dims: [48; 3],
        misalignment: m,
        ..common::spec(48, seed)
    };
    let v = spec.generate().unwrap().intensity;
    (spec, v)
}

fn translation_norm(t: &AffineTransform) -> f64 {
    let m = t.matrix();
    (m[0][3].powi(2) + m[1][3].powi(2) + m[2][3].powi(2)).sqrt()
}

#[test]
fn self_registration_is_near_identity() {
    let (_, v) = phantom(3, Misalignment::default());
    let r = estimate_affine(&v, &v, &RegistrationConfig::default()).unwrap();
    assert!(translation_norm(&r.transform) < 0.5);
    let l = r.transform.linear();
    for k in 0..3 {
        let col = (l[0][k].powi(2) + l[1][k].powi(2) + l[2][k].powi(2)).sqrt();
        assert!((col - 1.0).abs() < 0.01, "scale {col}");
    }
    assert!(r.similarity > 0.99);
}

#[test]
fn recovers_a_five_voxel_shift() {
    let (_, fixed) = phantom(0, Misalignment::default());
    let shift = Misalignment {
        translation_mm: [5.0, 0.0, 0.0],
        ..Default::default()
    };
    let (spec, moving) = phantom(1, shift);
    let r = estimate_affine(&moving, &fixed, &RegistrationConfig::default()).unwrap();
    let truth = spec.to_reference().unwrap();
    let m = r.transform.matrix();
    assert!((m[0][3] + 5.0).abs() < 0.5, "x translation {}", m[0][3]);
    assert!(m[1][3].abs() < 0.5 && m[2][3].abs() < 0.5);
    let err = mean_corner_error(fixed.grid(), &r.transform, &truth);
    assert!(err < 2.0, "corner error {err}");
}

#[test]
fn white_noise_does_not_correlate() {
    let g = Grid::with_spacing([32; 3], [1.0; 3]).unwrap();
    let n = Normal::new(0.0f32, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = Volume::new(g.clone(), (0..g.len()).map(|_| n.sample(&mut rng)).collect()).unwrap();
    let b = Volume::new(g.clone(), (0..g.len()).map(|_| n.sample(&mut rng)).collect()).unwrap();
    let r = estimate_affine(&a, &b, &RegistrationConfig::default()).unwrap();
    assert!(r.similarity < 0.2, "similarity {}", r.similarity);
}

#[test]
fn deterministic_and_never_worse_than_identity() {
    let (_, fixed) = phantom(0, Misalignment::default());
    let m = Misalignment {
        rotation_deg: [3.0, 0.0, -6.0],
        translation_mm: [2.0, -3.0, 1.0],
        scale: [1.05, 1.0, 0.95],
    };
    let (_, moving) = phantom(2, m);
    let cfg = RegistrationConfig::default();
    let a = estimate_affine(&moving, &fixed, &cfg).unwrap();
    let b = estimate_affine(&moving, &fixed, &cfg).unwrap();
    assert_eq!(a.transform, b.transform);
    assert_eq!(a.similarity.to_bits(), b.similarity.to_bits());
    let recovered = ncc(&fixed, &moving, &a.transform.invert().unwrap()).unwrap();
    let identity = ncc(&fixed, &moving, &AffineTransform::identity()).unwrap();
    assert!(recovered >= identity, "{recovered} < {identity}");
}
