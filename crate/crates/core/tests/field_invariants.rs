use fvdm_core::field::{build_surface_latents, eval_field, ShapeSpec};
use fvdm_core::geom::Bbox;
use fvdm_core::hierdec::gen_grid_points;

const SHAPES: [&str; 5] = [
    "sphere:r=0.5",
    "torus:R=0.5,r=0.15",
    "box:a=0.4",
    "plate:h=0.01",
    "union2:r=0.35,s=0.25,d=0.25",
];

#[test]
fn far_field_sign_matches_analytic_sdf() {
    let tau = 1e-3;
    let trunc = 0.125;
    for spec in SHAPES {
        let shape: ShapeSpec = spec.parse().unwrap();
        let lat = build_surface_latents(&shape, 3072, 1, tau, trunc).unwrap();
        let pts = gen_grid_points(40, &Bbox::unit());
        let vals = eval_field(&pts, &lat, None);
        let (mut far, mut agree) = (0usize, 0usize);
        for (p, v) in pts.iter().zip(&vals) {
            let s = shape.sdf([p[0] as f64, p[1] as f64, p[2] as f64]);
            if s.abs() >= 2.0 * tau.sqrt() {
                far += 1;
                agree += ((s <= 0.0) == (*v <= 0.0)) as usize;
            }
        }
        let frac = agree as f64 / far as f64;
        println!("{spec}: far-field sign agreement {frac:.6} over {far} points");
        assert!(frac >= 0.999, "{spec}: {frac}");
    }
}

#[test]
fn field_lipschitz_bound() {
    let trunc = 0.125;
    for spec in SHAPES {
        let shape: ShapeSpec = spec.parse().unwrap();
        let lat = build_surface_latents(&shape, 1024, 2, 1e-3, trunc).unwrap();
        let res = 64;
        let h = 2.0 / res as f64;
        let pts = gen_grid_points(res, &Bbox::unit());
        let vals = eval_field(&pts, &lat, None);
        let mut l: f64 = 0.0;
        for i in 0..res - 1 {
            for j in 0..res {
                for k in 0..res {
                    let a = i + res * (j + res * k);
                    l = l.max((vals[a + 1] - vals[a]).abs() as f64 / h);
                }
            }
        }
        // world-space slope of the normalized field; 1/trunc for an exact SDF
        println!("{spec}: empirical Lipschitz constant {l:.2} (exact sdf {:.2})", 1.0 / trunc);
        assert!(l.is_finite() && l < 50.0 / trunc, "{spec}: {l}");
    }
}
