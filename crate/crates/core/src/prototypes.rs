//! Region prototypes and their measurements.
//!
//! Every measurement returns its value together with analytic gradients with
//! respect to the embedding, the prototype center and the prototype's scalar
//! parameter (radius, half-angle or log σ).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{contract, ensure_same_dim, Error, Result};
use crate::numerics::{clamp_unit, dot, mean_vector, norm, safe_arccos, safe_arccos_derivative, sq_dist};

/// Lower bound on the initial Gaussian variance.
pub const GAUSSIAN_VAR_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "hypersphere")]
    Hypersphere,
    #[serde(rename = "cone")]
    Cone,
    #[serde(rename = "gaussian")]
    Gaussian,
    /// Plain class-mean prototypes: a hypersphere whose radius is pinned at 0.
    #[serde(rename = "vanilla-baseline")]
    Vanilla,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Hypersphere, Variant::Cone, Variant::Gaussian, Variant::Vanilla];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Hypersphere => "hypersphere",
            Variant::Cone => "cone",
            Variant::Gaussian => "gaussian",
            Variant::Vanilla => "vanilla-baseline",
        }
    }

    /// Whether the scalar parameter is trained.
    pub fn learns_scale(self) -> bool {
        self != Variant::Vanilla
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| contract(format!("unknown prototype variant `{s}`")))
    }
}

/// Center `z` and radius `ε` in squared-distance units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypersphereProto {
    pub center: Vec<f64>,
    pub radius: f64,
}

/// Center direction `z` and half-angle `ε` in radians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeProto {
    pub center: Vec<f64>,
    pub angle: f64,
}

/// Isotropic Gaussian `N(μ, σ²I)` with `σ = exp(log_sigma)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianProto {
    pub mean: Vec<f64>,
    pub log_sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasureResult {
    pub value: f64,
    pub grad_embedding: Vec<f64>,
    pub grad_center: Vec<f64>,
    /// Derivative with respect to the scalar parameter (ε, ε or log σ).
    pub grad_scale: f64,
}

fn check_support(support: &[Vec<f64>]) -> Result<()> {
    if support.is_empty() {
        return Err(contract("prototype initialization needs a non-empty support set"));
    }
    if support.iter().flatten().any(|v| !v.is_finite()) {
        return Err(contract("support embeddings must be finite"));
    }
    Ok(())
}

impl HypersphereProto {
    /// Center at the support mean; radius is the mean squared distance to it.
    pub fn from_support(support: &[Vec<f64>]) -> Result<Self> {
        check_support(support)?;
        let center = mean_vector(support)?;
        let radius = support.iter().map(|f| sq_dist(f, &center)).sum::<f64>() / support.len() as f64;
        Ok(Self { center, radius })
    }

    /// `‖f − z‖² − ε`; negative inside the sphere.
    pub fn measure(&self, f: &[f64]) -> Result<MeasureResult> {
        ensure_same_dim(self.center.len(), f.len(), "hypersphere measure")?;
        let diff: Vec<f64> = f.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        Ok(MeasureResult {
            value: dot(&diff, &diff) - self.radius,
            grad_embedding: diff.iter().map(|d| 2.0 * d).collect(),
            grad_center: diff.iter().map(|d| -2.0 * d).collect(),
            grad_scale: -1.0,
        })
    }
}

/// Angle between two nonzero vectors with its gradients in both arguments.
fn angle_with_grads(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (na, nb) = (norm(a), norm(b));
    let u = dot(a, b) / (na * nb);
    let theta = clamp_unit(u).acos();
    let dtheta_du = safe_arccos_derivative(u);
    let grad_a = a
        .iter()
        .zip(b)
        .map(|(ai, bi)| dtheta_du * (bi / (na * nb) - u * ai / (na * na)))
        .collect();
    let grad_b = a
        .iter()
        .zip(b)
        .map(|(ai, bi)| dtheta_du * (ai / (na * nb) - u * bi / (nb * nb)))
        .collect();
    (theta, grad_a, grad_b)
}

/// Angle between two nonzero vectors.
pub fn angle_between(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure_same_dim(a.len(), b.len(), "angle")?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(contract("angle with a zero-norm vector is undefined"));
    }
    safe_arccos(dot(a, b) / (na * nb))
}

impl ConeProto {
    /// Center at the (unnormalized) support mean; half-angle is the mean angle
    /// of the support to that center.
    pub fn from_support(support: &[Vec<f64>]) -> Result<Self> {
        check_support(support)?;
        if support.iter().any(|f| norm(f) == 0.0) {
            return Err(contract("cone support contains a zero-norm embedding"));
        }
        let center = mean_vector(support)?;
        let scale = support.iter().map(|f| norm(f)).fold(0.0, f64::max);
        if norm(&center) <= 1e-12 * scale {
            return Err(Error::DegenerateSupport(
                "support embeddings average to the zero vector".into(),
            ));
        }
        let mut total = 0.0;
        for f in support {
            total += angle_between(f, &center)?;
        }
        Ok(Self {
            center,
            angle: total / support.len() as f64,
        })
    }

    /// `−cos(θ − ε)` outside the cone (`θ ≥ |ε|`), constant `−1` inside.
    pub fn measure(&self, f: &[f64]) -> Result<MeasureResult> {
        ensure_same_dim(self.center.len(), f.len(), "cone measure")?;
        if norm(f) == 0.0 || norm(&self.center) == 0.0 {
            return Err(contract("cone measure with a zero-norm vector"));
        }
        let (theta, d_f, d_z) = angle_with_grads(f, &self.center);
        let dim = f.len();
        if theta < self.angle.abs() {
            return Ok(MeasureResult {
                value: -1.0,
                grad_embedding: vec![0.0; dim],
                grad_center: vec![0.0; dim],
                grad_scale: 0.0,
            });
        }
        let gap = theta - self.angle;
        let dm_dtheta = gap.sin();
        Ok(MeasureResult {
            value: -gap.cos(),
            grad_embedding: d_f.iter().map(|g| dm_dtheta * g).collect(),
            grad_center: d_z.iter().map(|g| dm_dtheta * g).collect(),
            grad_scale: -dm_dtheta,
        })
    }
}

/// Value and gradients of the cone overlap penalty.
#[derive(Clone, Debug, PartialEq)]
pub struct Disjointness {
    pub value: f64,
    pub grad_angles: Vec<f64>,
    pub grad_centers: Vec<Vec<f64>>,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `(1/N) Σ_{i<j} max(|εᵢ| + |εⱼ| − θ(zᵢ, zⱼ), 0)`.
///
/// The hinge and `|·|` both use a zero subgradient at their kinks.
pub fn cone_disjointness(protos: &[ConeProto]) -> Result<Disjointness> {
    let n = protos.len();
    if n < 2 {
        return Err(contract("disjointness needs at least two cones"));
    }
    let dim = protos[0].center.len();
    for p in protos {
        ensure_same_dim(dim, p.center.len(), "cone disjointness")?;
        if norm(&p.center) == 0.0 {
            return Err(contract("cone center has zero norm"));
        }
    }
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad_angles = vec![0.0; n];
    let mut grad_centers = vec![vec![0.0; dim]; n];
    for i in 0..n {
        for j in i + 1..n {
            let (theta, d_i, d_j) = angle_with_grads(&protos[i].center, &protos[j].center);
            let overlap = protos[i].angle.abs() + protos[j].angle.abs() - theta;
            if overlap <= 0.0 {
                continue;
            }
            value += overlap * inv_n;
            grad_angles[i] += sign(protos[i].angle) * inv_n;
            grad_angles[j] += sign(protos[j].angle) * inv_n;
            grad_centers[i].iter_mut().zip(&d_i).for_each(|(g, d)| *g -= d * inv_n);
            grad_centers[j].iter_mut().zip(&d_j).for_each(|(g, d)| *g -= d * inv_n);
        }
    }
    Ok(Disjointness {
        value,
        grad_angles,
        grad_centers,
    })
}

impl GaussianProto {
    /// Mean of the support; `σ² = max(1e−4, Σ‖fᵢ − μ‖² / (K·D))`.
    pub fn from_support(support: &[Vec<f64>]) -> Result<Self> {
        check_support(support)?;
        let mean = mean_vector(support)?;
        let scatter: f64 = support.iter().map(|f| sq_dist(f, &mean)).sum();
        let var = (scatter / (support.len() * mean.len()) as f64).max(GAUSSIAN_VAR_FLOOR);
        Ok(Self {
            mean,
            log_sigma: 0.5 * var.ln(),
        })
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    /// Negative log-likelihood `‖f − μ‖²/(2σ²) + d·log σ + (d/2)·log 2π`.
    pub fn measure(&self, f: &[f64]) -> Result<MeasureResult> {
        ensure_same_dim(self.mean.len(), f.len(), "gaussian measure")?;
        let d = f.len() as f64;
        let inv_var = (-2.0 * self.log_sigma).exp();
        let diff: Vec<f64> = f.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let r2 = dot(&diff, &diff);
        Ok(MeasureResult {
            value: 0.5 * r2 * inv_var + d * self.log_sigma + 0.5 * d * (2.0 * PI).ln(),
            grad_embedding: diff.iter().map(|x| x * inv_var).collect(),
            grad_center: diff.iter().map(|x| -x * inv_var).collect(),
            grad_scale: d - r2 * inv_var,
        })
    }
}

/// One class representation of any variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum Prototype {
    Hypersphere(HypersphereProto),
    Cone(ConeProto),
    Gaussian(GaussianProto),
}

impl Prototype {
    /// Closed-form prototype of the given variant from support embeddings.
    pub fn from_support(variant: Variant, support: &[Vec<f64>]) -> Result<Self> {
        Ok(match variant {
            Variant::Hypersphere => Prototype::Hypersphere(HypersphereProto::from_support(support)?),
            Variant::Vanilla => {
                check_support(support)?;
                Prototype::Hypersphere(HypersphereProto {
                    center: mean_vector(support)?,
                    radius: 0.0,
                })
            }
            Variant::Cone => Prototype::Cone(ConeProto::from_support(support)?),
            Variant::Gaussian => Prototype::Gaussian(GaussianProto::from_support(support)?),
        })
    }

    pub fn measure(&self, f: &[f64]) -> Result<MeasureResult> {
        match self {
            Prototype::Hypersphere(p) => p.measure(f),
            Prototype::Cone(p) => p.measure(f),
            Prototype::Gaussian(p) => p.measure(f),
        }
    }

    pub fn center(&self) -> &[f64] {
        match self {
            Prototype::Hypersphere(p) => &p.center,
            Prototype::Cone(p) => &p.center,
            Prototype::Gaussian(p) => &p.mean,
        }
    }

    pub fn center_mut(&mut self) -> &mut Vec<f64> {
        match self {
            Prototype::Hypersphere(p) => &mut p.center,
            Prototype::Cone(p) => &mut p.center,
            Prototype::Gaussian(p) => &mut p.mean,
        }
    }

    /// The scalar parameter: radius, half-angle or log σ.
    pub fn scale(&self) -> f64 {
        match self {
            Prototype::Hypersphere(p) => p.radius,
            Prototype::Cone(p) => p.angle,
            Prototype::Gaussian(p) => p.log_sigma,
        }
    }

    pub fn set_scale(&mut self, value: f64) {
        match self {
            Prototype::Hypersphere(p) => p.radius = value,
            Prototype::Cone(p) => p.angle = value,
            Prototype::Gaussian(p) => p.log_sigma = value,
        }
    }

    pub fn as_cone(&self) -> Option<&ConeProto> {
        match self {
            Prototype::Cone(c) => Some(c),
            _ => None,
        }
    }
}

/// Index of the smallest measurement; ties go to the lowest index.
pub fn argmin_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn hypersphere_init_examples() {
        let p = HypersphereProto::from_support(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(
            p,
            HypersphereProto {
                center: vec![1.0, 0.0],
                radius: 1.0
            }
        );
        let p = HypersphereProto::from_support(&[vec![5.0, 5.0]]).unwrap();
        assert_eq!(p.radius, 0.0);
        let square = [vec![0.0, 0.0], vec![0.0, 2.0], vec![2.0, 0.0], vec![2.0, 2.0]];
        let p = HypersphereProto::from_support(&square).unwrap();
        assert_eq!(
            p,
            HypersphereProto {
                center: vec![1.0, 1.0],
                radius: 2.0
            }
        );
        assert!(HypersphereProto::from_support(&[]).is_err());
        assert!(HypersphereProto::from_support(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn hypersphere_measure_examples() {
        let p = HypersphereProto {
            center: vec![3.0, 4.0],
            radius: 1.0,
        };
        assert_eq!(p.measure(&[0.0, 0.0]).unwrap().value, 24.0);

        let p = HypersphereProto {
            center: vec![1.0, 2.0],
            radius: 0.5,
        };
        let m = p.measure(&[1.0, 2.0]).unwrap();
        assert_eq!(m.value, -0.5);
        assert_eq!(m.grad_embedding, vec![0.0, 0.0]);
        assert_eq!(m.grad_scale, -1.0);

        let p = HypersphereProto {
            center: vec![0.0, 0.0],
            radius: 0.5,
        };
        let m = p.measure(&[1.0, 0.0]).unwrap();
        assert_eq!(m.value, 0.5);
        assert_eq!(m.grad_embedding, vec![2.0, 0.0]);
        assert_eq!(m.grad_center, vec![-2.0, 0.0]);
        assert!(p.measure(&[1.0]).is_err());
    }

    #[test]
    fn cone_init_examples() {
        let c = ConeProto::from_support(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(c.center, vec![0.5, 0.5]);
        assert!(close(c.angle, FRAC_PI_4, 1e-12));
        let c = ConeProto::from_support(&[vec![2.0, 0.0]]).unwrap();
        assert_eq!(c.center, vec![2.0, 0.0]);
        assert!(c.angle < 2e-6);
        let err = ConeProto::from_support(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap_err();
        assert!(matches!(err, Error::DegenerateSupport(_)));
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn cone_measure_examples() {
        let aligned = ConeProto {
            center: vec![1.0, 0.0],
            angle: 0.0,
        };
        assert!(close(aligned.measure(&[1.0, 0.0]).unwrap().value, -1.0, 1e-11));

        let c = ConeProto {
            center: vec![1.0, 0.0],
            angle: FRAC_PI_4,
        };
        let m = c.measure(&[0.0, 1.0]).unwrap();
        assert!(close(m.value, -(FRAC_PI_4.cos()), 1e-12));
        assert!(close(m.value, -0.70711, 1e-5));

        let c = ConeProto {
            center: vec![1.0, 0.0],
            angle: 0.5,
        };
        let theta = 0.05f64.atan();
        assert!(close(theta, 0.04996, 1e-5) && theta < 0.5);
        let m = c.measure(&[1.0, 0.05]).unwrap();
        assert_eq!(m.value, -1.0);
        assert_eq!(m.grad_embedding, vec![0.0, 0.0]);
        assert_eq!(m.grad_center, vec![0.0, 0.0]);
        assert_eq!(m.grad_scale, 0.0);

        assert!(c.measure(&[0.0, 0.0]).is_err());
        let zero = ConeProto {
            center: vec![0.0, 0.0],
            angle: 0.1,
        };
        assert!(zero.measure(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn cone_at_right_angle_has_expected_scale_gradient() {
        let c = ConeProto {
            center: vec![1.0, 0.0],
            angle: 0.2,
        };
        let m = c.measure(&[0.0, 3.0]).unwrap();
        assert!(close(m.grad_scale, -(FRAC_PI_2 - 0.2).sin(), 1e-12));
    }

    fn cone_pair_at(theta: f64, a: f64, b: f64) -> Vec<ConeProto> {
        vec![
            ConeProto {
                center: vec![1.0, 0.0],
                angle: a,
            },
            ConeProto {
                center: vec![theta.cos(), theta.sin()],
                angle: b,
            },
        ]
    }

    #[test]
    fn disjointness_examples() {
        let d = cone_disjointness(&cone_pair_at(0.4, 0.3, 0.2)).unwrap();
        assert!(close(d.value, 0.05, 1e-12), "{}", d.value);
        assert_eq!(d.grad_angles, vec![0.5, 0.5]);

        let d = cone_disjointness(&cone_pair_at(1.0, 0.1, 0.1)).unwrap();
        assert_eq!(d.value, 0.0);
        assert_eq!(d.grad_angles, vec![0.0, 0.0]);
        assert!(d.grad_centers.iter().flatten().all(|&g| g == 0.0));

        let three = vec![
            ConeProto {
                center: vec![1.0, 0.0, 0.0],
                angle: 0.3,
            },
            ConeProto {
                center: vec![0.0, 1.0, 0.0],
                angle: 0.3,
            },
            ConeProto {
                center: vec![0.0, 0.0, 1.0],
                angle: -0.3,
            },
        ];
        assert_eq!(cone_disjointness(&three).unwrap().value, 0.0);
        assert!(cone_disjointness(&three[..1]).is_err());
    }

    #[test]
    fn negative_angle_uses_its_magnitude() {
        let d = cone_disjointness(&cone_pair_at(0.4, -0.3, 0.2)).unwrap();
        assert!(close(d.value, 0.05, 1e-12));
        assert_eq!(d.grad_angles, vec![-0.5, 0.5]);
    }

    #[test]
    fn gaussian_init_examples() {
        let g = GaussianProto::from_support(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(g.mean, vec![1.0, 0.0]);
        assert!(close((2.0 * g.log_sigma).exp(), 0.5, 1e-15));
        let g = GaussianProto::from_support(&[vec![3.0, 3.0]]).unwrap();
        assert!(close((2.0 * g.log_sigma).exp(), GAUSSIAN_VAR_FLOOR, 1e-18));
        let g = GaussianProto::from_support(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(close((2.0 * g.log_sigma).exp(), GAUSSIAN_VAR_FLOOR, 1e-18));
        assert!(GaussianProto::from_support(&[]).is_err());
    }

    #[test]
    fn gaussian_measure_examples() {
        let unit = GaussianProto {
            mean: vec![0.0, 0.0],
            log_sigma: 0.0,
        };
        let m = unit.measure(&[0.0, 0.0]).unwrap();
        assert!(close(m.value, (2.0 * PI).ln(), 1e-15) && close(m.value, 1.83788, 1e-5));
        assert_eq!(m.grad_scale, 2.0);
        assert!(close(unit.measure(&[1.0, 0.0]).unwrap().value, 2.33788, 1e-5));

        let g = GaussianProto {
            mean: vec![0.0, 0.0],
            log_sigma: 2f64.ln(),
        };
        let m = g.measure(&[3.0, 4.0]).unwrap();
        let expected = 25.0 / 8.0 + 2.0 * 2f64.ln() + (2.0 * PI).ln();
        assert!(close(m.value, expected, 1e-12) && close(m.value, 6.34917, 1e-5));
        assert!(g.measure(&[1.0]).is_err());
    }

    #[test]
    fn vanilla_prototype_has_zero_radius() {
        let p = Prototype::from_support(Variant::Vanilla, &[vec![0.0], vec![4.0]]).unwrap();
        assert_eq!(
            p,
            Prototype::Hypersphere(HypersphereProto {
                center: vec![2.0],
                radius: 0.0
            })
        );
    }

    #[test]
    fn argmin_breaks_ties_low() {
        assert_eq!(argmin_first(&[1.0, 0.5, 0.5]), 1);
        assert_eq!(argmin_first(&[0.0, 0.0]), 0);
    }

    #[test]
    fn prototype_json_shape() {
        let p = Prototype::Cone(ConeProto {
            center: vec![1.0, 2.0],
            angle: 0.25,
        });
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(text, r#"{"variant":"cone","center":[1.0,2.0],"angle":0.25}"#);
        assert_eq!(serde_json::from_str::<Prototype>(&text).unwrap(), p);
        assert_eq!("vanilla-baseline".parse::<Variant>().unwrap(), Variant::Vanilla);
    }
}
