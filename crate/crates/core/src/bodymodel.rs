//! Articulated capsule body: kinematic chain, poses, per-bone rigid
//! transforms and corresponded surface vertices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    self, add, axis_angle_to_matrix, cross, dot, lift3, mat_mul, mat_vec, matrix_to_axis_angle, norm,
    normalize, scale, sub, transpose, Mat3, Scalar, Vec3,
};

pub const MAX_BONES: usize = 24;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BodyError {
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("{what}: expected {expected} bones, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{0} contains non-finite values")]
    NonFinite(&'static str),
}

/// Kinematic tree with capsule geometry in canonical (rest) space.
///
/// Bone `i` is a capsule from `rest_joints[i]` to `rest_tails[i]` and rotates
/// about its joint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SkeletonSpec", into = "SkeletonSpec")]
pub struct Skeleton {
    parents: Vec<Option<usize>>,
    rest_joints: Vec<Vec3>,
    rest_tails: Vec<Vec3>,
    bone_radii: Vec<f64>,
    order: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub parents: Vec<Option<usize>>,
    pub rest_joints: Vec<Vec3>,
    pub rest_tails: Vec<Vec3>,
    pub bone_radii: Vec<f64>,
}

impl TryFrom<SkeletonSpec> for Skeleton {
    type Error = BodyError;
    fn try_from(s: SkeletonSpec) -> Result<Self, BodyError> {
        Skeleton::new(s.parents, s.rest_joints, s.rest_tails, s.bone_radii)
    }
}

impl From<Skeleton> for SkeletonSpec {
    fn from(s: Skeleton) -> Self {
        SkeletonSpec {
            parents: s.parents,
            rest_joints: s.rest_joints,
            rest_tails: s.rest_tails,
            bone_radii: s.bone_radii,
        }
    }
}

impl Skeleton {
    pub fn new(
        parents: Vec<Option<usize>>,
        rest_joints: Vec<Vec3>,
        rest_tails: Vec<Vec3>,
        bone_radii: Vec<f64>,
    ) -> Result<Self, BodyError> {
        let k = parents.len();
        if !(2..=MAX_BONES).contains(&k) {
            return Err(BodyError::InvalidSkeleton(format!("bone count {k} outside 2..={MAX_BONES}")));
        }
        for (what, len) in [
            ("rest_joints", rest_joints.len()),
            ("rest_tails", rest_tails.len()),
            ("bone_radii", bone_radii.len()),
        ] {
            if len != k {
                return Err(BodyError::DimensionMismatch {
                    what,
                    expected: k,
                    actual: len,
                });
            }
        }
        if rest_joints.iter().chain(&rest_tails).flatten().any(|v| !v.is_finite()) {
            return Err(BodyError::NonFinite("skeleton"));
        }
        if bone_radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(BodyError::InvalidSkeleton("bone radii must be positive".into()));
        }
        let roots: Vec<usize> = (0..k).filter(|&i| parents[i].is_none()).collect();
        if roots.len() != 1 {
            return Err(BodyError::InvalidSkeleton(format!("expected one root, found {}", roots.len())));
        }
        if let Some((i, p)) = parents.iter().enumerate().find_map(|(i, p)| p.filter(|&p| p >= k || p == i).map(|p| (i, p))) {
            return Err(BodyError::InvalidSkeleton(format!("bone {i} has invalid parent {p}")));
        }
        // breadth-first from the root; anything unreached sits on a cycle
        let mut order = roots.clone();
        let mut head = 0;
        while head < order.len() {
            let b = order[head];
            order.extend((0..k).filter(|&c| parents[c] == Some(b)));
            head += 1;
        }
        if order.len() != k {
            return Err(BodyError::InvalidSkeleton("parent array contains a cycle".into()));
        }
        Ok(Self {
            parents,
            rest_joints,
            rest_tails,
            bone_radii,
            order,
        })
    }

    /// Torso, head, one arm and one leg; the torso is the root.
    pub fn humanoid4() -> Self {
        Self::new(
            vec![None, Some(0), Some(0), Some(0)],
            vec![[0.0, 0.0, 0.0], [0.0, 0.52, 0.0], [0.16, 0.42, 0.0], [0.08, 0.0, 0.0]],
            vec![[0.0, 0.42, 0.0], [0.0, 0.7, 0.0], [0.56, 0.42, 0.0], [0.08, -0.5, 0.0]],
            vec![0.15, 0.11, 0.06, 0.07],
        )
        .expect("built-in skeleton is valid")
    }

    pub fn num_bones(&self) -> usize {
        self.parents.len()
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn rest_joints(&self) -> &[Vec3] {
        &self.rest_joints
    }

    pub fn rest_tails(&self) -> &[Vec3] {
        &self.rest_tails
    }

    pub fn bone_radii(&self) -> &[f64] {
        &self.bone_radii
    }

    pub fn max_radius(&self) -> f64 {
        self.bone_radii.iter().copied().fold(0.0, f64::max)
    }

    /// Bones ordered so every parent precedes its children.
    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    /// Axis-aligned bounds of the rest-pose capsules.
    pub fn canonical_bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for b in 0..self.num_bones() {
            let r = self.bone_radii[b];
            for p in [self.rest_joints[b], self.rest_tails[b]] {
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a] - r);
                    hi[a] = hi[a].max(p[a] + r);
                }
            }
        }
        (lo, hi)
    }

    /// The rest pose: zero rotations, joints at their rest positions.
    pub fn rest_pose(&self) -> Pose {
        Pose {
            joints: self.rest_joints.clone(),
            rotations: vec![[0.0; 3]; self.num_bones()],
        }
    }
}

/// Joint positions `J` and local axis-angle rotations `Ω`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub joints: Vec<Vec3>,
    pub rotations: Vec<Vec3>,
}

impl Pose {
    pub fn validate(&self, skel: &Skeleton) -> Result<(), BodyError> {
        let k = skel.num_bones();
        for (what, len) in [("pose joints", self.joints.len()), ("pose rotations", self.rotations.len())] {
            if len != k {
                return Err(BodyError::DimensionMismatch {
                    what,
                    expected: k,
                    actual: len,
                });
            }
        }
        if self.joints.iter().chain(&self.rotations).flatten().any(|v| !v.is_finite()) {
            return Err(BodyError::NonFinite("pose"));
        }
        Ok(())
    }

    /// Rotations flattened bone-major, used as pose conditioning.
    pub fn flat_rotations(&self) -> Vec<f64> {
        self.rotations.iter().flatten().copied().collect()
    }
}

/// Per-bone rigid maps from observation to canonical space,
/// `x_c = R_i x_o + t_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoneTransformSet {
    pub rotations: Vec<Mat3>,
    pub translations: Vec<Vec3>,
}

impl BoneTransformSet {
    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }

    /// Observation → canonical for bone `i`.
    pub fn to_canonical(&self, i: usize, x: Vec3) -> Vec3 {
        add(mat_vec(self.rotations[i], x), self.translations[i])
    }

    /// Canonical → observation for bone `i`.
    pub fn to_observation(&self, i: usize, x: Vec3) -> Vec3 {
        mat_vec(transpose(self.rotations[i]), sub(x, self.translations[i]))
    }

    /// Row-major `[R | t]`, twelve numbers per bone.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(12 * self.len());
        for (r, t) in self.rotations.iter().zip(&self.translations) {
            out.extend(r.iter().flatten());
            out.extend(t);
        }
        out
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        let mut rotations = Vec::with_capacity(flat.len() / 12);
        let mut translations = Vec::with_capacity(flat.len() / 12);
        for c in flat.chunks_exact(12) {
            rotations.push([[c[0], c[1], c[2]], [c[3], c[4], c[5]], [c[6], c[7], c[8]]]);
            translations.push([c[9], c[10], c[11]]);
        }
        Self { rotations, translations }
    }
}

/// Rotation and translation of one bone.
pub type RigidTransform<S> = ([[S; 3]; 3], [S; 3]);

/// Forward kinematics followed by inversion, generic over the scalar so that
/// pose-correction Jacobians can be taken with dual numbers.
///
/// `local` holds each bone's local rotation. Returns observation→canonical
/// `(R_i, t_i)` per bone.
pub fn transforms_from_local<S: Scalar>(
    skel: &Skeleton,
    joints: &[Vec3],
    local: &[[[S; 3]; 3]],
) -> Vec<RigidTransform<S>> {
    let k = skel.num_bones();
    let mut global: Vec<Option<RigidTransform<S>>> = vec![None; k];
    for &b in skel.topological_order() {
        let g = match skel.parents[b] {
            None => (local[b], lift3(joints[b])),
            Some(p) => {
                let (pr, pt) = global[p].expect("parents precede children");
                let offset = lift3(sub(joints[b], joints[p]));
                (mat_mul(pr, local[b]), add(mat_vec(pr, offset), pt))
            }
        };
        global[b] = Some(g);
    }
    global
        .into_iter()
        .enumerate()
        .map(|(b, g)| {
            let (gr, gt) = g.expect("every bone visited");
            let rt = transpose(gr);
            (rt, sub(lift3(skel.rest_joints[b]), mat_vec(rt, gt)))
        })
        .collect()
}

pub fn bone_transforms(skel: &Skeleton, pose: &Pose) -> Result<BoneTransformSet, BodyError> {
    pose.validate(skel)?;
    let local: Vec<Mat3> = pose.rotations.iter().map(|&w| axis_angle_to_matrix(w)).collect();
    let (rotations, translations) = transforms_from_local(skel, &pose.joints, &local).into_iter().unzip();
    Ok(BoneTransformSet { rotations, translations })
}

/// Local rotations `R(ω_i)·R(Δω_i)`, generic for differentiation in `Δω`.
pub fn corrected_local_rotations<S: Scalar>(pose: &Pose, delta: &[[S; 3]]) -> Vec<[[S; 3]; 3]> {
    pose.rotations
        .iter()
        .zip(delta)
        .map(|(&w, &dw)| mat_mul(geometry::lift33(axis_angle_to_matrix(w)), axis_angle_to_matrix(dw)))
        .collect()
}

/// Composes each rotation with its residual, `matrix(ω_i)·matrix(Δω_i)`, and
/// converts back to axis-angle. Joints are untouched.
pub fn apply_pose_correction(pose: &Pose, delta: &[Vec3]) -> Result<Pose, BodyError> {
    if delta.len() != pose.rotations.len() {
        return Err(BodyError::DimensionMismatch {
            what: "pose correction",
            expected: pose.rotations.len(),
            actual: delta.len(),
        });
    }
    let rotations = corrected_local_rotations(pose, delta).into_iter().map(matrix_to_axis_angle).collect();
    Ok(Pose {
        joints: pose.joints.clone(),
        rotations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Observation,
    Canonical,
}

/// Capsule-surface points with a fixed per-skeleton ordering, so vertex `i`
/// is the same body location in every pose.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceVertices {
    pub positions: Vec<Vec3>,
    pub bones: Vec<usize>,
    pub space: Space,
}

impl SurfaceVertices {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Unit vectors orthogonal to `axis` and to each other.
pub fn orthonormal_basis(axis: Vec3) -> (Vec3, Vec3) {
    let helper = if axis[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let u = normalize(cross(axis, helper));
    let v = cross(axis, u);
    (u, v)
}

/// Deterministic point on the rest capsule of `bone`: `j`-th of `n` along the
/// unrolled meridian, spun by the golden angle.
fn capsule_point(skel: &Skeleton, bone: usize, j: usize, n: usize) -> Vec3 {
    const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;
    let head = skel.rest_joints[bone];
    let tail = skel.rest_tails[bone];
    let r = skel.bone_radii[bone];
    let seg = sub(tail, head);
    let len = norm(seg);
    let axis = if len > 0.0 { scale(seg, 1.0 / len) } else { [0.0, 1.0, 0.0] };
    let (u, v) = orthonormal_basis(axis);
    let quarter = std::f64::consts::FRAC_PI_2 * r;
    let s = (2.0 * quarter + len) * (j as f64 + 0.5) / n as f64;
    let phi = j as f64 * GOLDEN_ANGLE;
    let radial = add(scale(u, phi.cos()), scale(v, phi.sin()));
    if s < quarter {
        let beta = s / r;
        add(head, add(scale(axis, -r * beta.cos()), scale(radial, r * beta.sin())))
    } else if s < quarter + len {
        add(head, add(scale(axis, s - quarter), scale(radial, r)))
    } else {
        let beta = (s - quarter - len) / r;
        add(tail, add(scale(axis, r * beta.sin()), scale(radial, r * beta.cos())))
    }
}

/// Samples `n_per_bone` points on every capsule, placed by the given pose.
pub fn generate_surface(skel: &Skeleton, pose: &Pose, n_per_bone: usize) -> Result<SurfaceVertices, BodyError> {
    if n_per_bone == 0 {
        return Err(BodyError::InvalidSkeleton("n_per_bone must be at least 1".into()));
    }
    let bt = bone_transforms(skel, pose)?;
    let k = skel.num_bones();
    let mut positions = Vec::with_capacity(k * n_per_bone);
    let mut bones = Vec::with_capacity(k * n_per_bone);
    for b in 0..k {
        for j in 0..n_per_bone {
            positions.push(bt.to_observation(b, capsule_point(skel, b, j, n_per_bone)));
            bones.push(b);
        }
    }
    Ok(SurfaceVertices {
        positions,
        bones,
        space: Space::Observation,
    })
}

/// Rest-pose surface, tagged canonical.
pub fn canonical_surface(skel: &Skeleton, n_per_bone: usize) -> Result<SurfaceVertices, BodyError> {
    let mut s = generate_surface(skel, &skel.rest_pose(), n_per_bone)?;
    s.space = Space::Canonical;
    Ok(s)
}

/// Distance from `p` to the segment `a..b`.
pub fn point_segment_distance(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = sub(b, a);
    let denom = dot(ab, ab);
    let t = if denom > 0.0 { (dot(sub(p, a), ab) / denom).clamp(0.0, 1.0) } else { 0.0 };
    norm(sub(p, add(a, scale(ab, t))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{det, identity};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn random_pose(skel: &Skeleton, seed: [f64; 4]) -> Pose {
        let k = skel.num_bones();
        Pose {
            joints: skel.rest_joints().iter().map(|j| add(*j, [seed[0], -seed[1], seed[2]])).collect(),
            rotations: (0..k)
                .map(|b| {
                    let s = seed[3] + b as f64;
                    [0.9 * (1.3 * s).sin(), 0.7 * (2.1 * s).cos(), 0.5 * (0.7 * s).sin()]
                })
                .collect(),
        }
    }

    fn mat_close(a: Mat3, b: Mat3, tol: f64) -> bool {
        (0..9).all(|i| (a[i / 3][i % 3] - b[i / 3][i % 3]).abs() <= tol)
    }

    #[test]
    fn rejects_bad_skeletons() {
        let j = vec![[0.0; 3]; 3];
        assert!(Skeleton::new(vec![None], vec![[0.0; 3]], vec![[0.0; 3]], vec![0.1]).is_err());
        assert!(Skeleton::new(vec![None, None, Some(0)], j.clone(), j.clone(), vec![0.1; 3]).is_err());
        assert!(Skeleton::new(vec![None, Some(2), Some(1)], j.clone(), j.clone(), vec![0.1; 3]).is_err());
        assert!(Skeleton::new(vec![None, Some(0), Some(0)], j.clone(), j.clone(), vec![0.1; 2]).is_err());
        assert!(Skeleton::new(vec![None, Some(0), Some(1)], j.clone(), j, vec![0.1; 3]).is_ok());
    }

    #[test]
    fn rest_pose_gives_identities() {
        let skel = Skeleton::humanoid4();
        let bt = bone_transforms(&skel, &skel.rest_pose()).unwrap();
        for b in 0..4 {
            assert_eq!(bt.rotations[b], identity::<f64>());
            assert_eq!(bt.translations[b], [0.0; 3]);
        }
    }

    #[test]
    fn root_half_turn_moves_every_bone_rigidly() {
        let skel = Skeleton::humanoid4();
        let mut pose = skel.rest_pose();
        pose.rotations[0] = [0.0, 0.0, PI];
        let bt = bone_transforms(&skel, &pose).unwrap();
        let half = axis_angle_to_matrix([0.0, 0.0, PI]);
        let root = skel.rest_joints()[0];
        for b in 0..4 {
            assert!(mat_close(bt.rotations[b], transpose(half), 1e-12));
            // inverse of x -> half*(x - root) + root
            let probe = [0.3, -0.2, 0.5];
            let expect = add(mat_vec(transpose(half), sub(probe, root)), root);
            assert!(norm(sub(bt.to_canonical(b, probe), expect)) < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let skel = Skeleton::humanoid4();
        let mut pose = skel.rest_pose();
        pose.rotations.pop();
        assert!(matches!(bone_transforms(&skel, &pose), Err(BodyError::DimensionMismatch { .. })));
        assert!(apply_pose_correction(&skel.rest_pose(), &[[0.0; 3]; 3]).is_err());
    }

    #[test]
    fn translating_joints_shifts_translations() {
        let skel = Skeleton::humanoid4();
        let pose = random_pose(&skel, [0.1, 0.2, 0.3, 0.4]);
        let v = [0.7, -0.3, 1.1];
        let moved = Pose {
            joints: pose.joints.iter().map(|j| add(*j, v)).collect(),
            rotations: pose.rotations.clone(),
        };
        let (a, b) = (bone_transforms(&skel, &pose).unwrap(), bone_transforms(&skel, &moved).unwrap());
        let probe = [0.2, 0.5, -0.1];
        for i in 0..4 {
            assert!(mat_close(a.rotations[i], b.rotations[i], 0.0));
            assert!(norm(sub(b.to_canonical(i, add(probe, v)), a.to_canonical(i, probe))) < 1e-12);
        }
    }

    #[test]
    fn surface_is_deterministic_and_counted() {
        let skel = Skeleton::humanoid4();
        let a = generate_surface(&skel, &skel.rest_pose(), 16).unwrap();
        let b = generate_surface(&skel, &skel.rest_pose(), 16).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        assert_eq!(generate_surface(&skel, &skel.rest_pose(), 1).unwrap().len(), 4);
        assert!(generate_surface(&skel, &skel.rest_pose(), 0).is_err());
    }

    #[test]
    fn pose_correction_examples() {
        let skel = Skeleton::humanoid4();
        let pose = random_pose(&skel, [0.0, 0.1, 0.2, 1.0]);
        let same = apply_pose_correction(&pose, &[[0.0; 3]; 4]).unwrap();
        for (a, b) in same.rotations.iter().zip(&pose.rotations) {
            assert!(norm(sub(*a, *b)) < 1e-12);
        }
        assert_eq!(same.joints, pose.joints);
        let mut p = skel.rest_pose();
        p.rotations[1] = [0.0, 0.0, PI / 4.0];
        let mut d = [[0.0; 3]; 4];
        d[1] = [0.0, 0.0, PI / 4.0];
        let c = apply_pose_correction(&p, &d).unwrap();
        assert!(norm(sub(c.rotations[1], [0.0, 0.0, PI / 2.0])) < 1e-12);
    }

    proptest! {
        #[test]
        fn transforms_are_rotations_and_round_trip(a in -1.0f64..1.0, b in -1.0f64..1.0, c in -1.0f64..1.0, s in 0.0f64..10.0) {
            let skel = Skeleton::humanoid4();
            let pose = random_pose(&skel, [a, b, c, s]);
            let bt = bone_transforms(&skel, &pose).unwrap();
            let p = [a * 0.5, b + 0.3, c - 0.2];
            for i in 0..4 {
                let r = bt.rotations[i];
                prop_assert!(mat_close(mat_mul(transpose(r), r), identity(), 1e-9));
                prop_assert!((det(r) - 1.0).abs() < 1e-9);
                prop_assert!(norm(sub(bt.to_observation(i, bt.to_canonical(i, p)), p)) < 1e-9);
            }
        }

        #[test]
        fn posed_vertices_lie_on_their_capsules(a in -1.0f64..1.0, b in -1.0f64..1.0, s in 0.0f64..10.0) {
            let skel = Skeleton::humanoid4();
            let pose = random_pose(&skel, [a, b, 0.1, s]);
            let bt = bone_transforms(&skel, &pose).unwrap();
            let surf = generate_surface(&skel, &pose, 24).unwrap();
            for (p, &bone) in surf.positions.iter().zip(&surf.bones) {
                let head = bt.to_observation(bone, skel.rest_joints()[bone]);
                let tail = bt.to_observation(bone, skel.rest_tails()[bone]);
                let d = point_segment_distance(*p, head, tail);
                prop_assert!(d <= skel.bone_radii()[bone] + 1e-9);
                prop_assert!(d >= skel.bone_radii()[bone] - 1e-9);
            }
        }

        #[test]
        fn rigid_warp_of_observed_vertices_recovers_canonical(a in -1.0f64..1.0, s in 0.0f64..10.0) {
            let skel = Skeleton::humanoid4();
            let pose = random_pose(&skel, [a, 0.2, -0.3, s]);
            let bt = bone_transforms(&skel, &pose).unwrap();
            let obs = generate_surface(&skel, &pose, 12).unwrap();
            let can = canonical_surface(&skel, 12).unwrap();
            for i in 0..obs.len() {
                let back = bt.to_canonical(obs.bones[i], obs.positions[i]);
                prop_assert!(norm(sub(back, can.positions[i])) < 1e-9);
            }
        }

        #[test]
        fn pose_correction_matches_matrix_composition(x in -1.5f64..1.5, y in -1.5f64..1.5, dz in -0.5f64..0.5) {
            let skel = Skeleton::humanoid4();
            let mut pose = skel.rest_pose();
            pose.rotations = vec![[x, y, 0.3], [0.1, x, y], [y, 0.2, x], [0.0, 0.0, x]];
            let delta = vec![[dz, 0.1, -dz]; 4];
            let c = apply_pose_correction(&pose, &delta).unwrap();
            for ((r, d), got) in pose.rotations.iter().zip(&delta).zip(&c.rotations) {
                let oracle = mat_mul(axis_angle_to_matrix(*r), axis_angle_to_matrix(*d));
                prop_assert!(mat_close(axis_angle_to_matrix(*got), oracle, 1e-9));
            }
        }
    }
}
