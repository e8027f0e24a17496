use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::EvalError;
use crate::field::{densities, FieldConfig, NerfParams};
use crate::scene::SceneSpec;

/// Triangle mesh.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

/// Cube corners as (x, y, z) bit offsets: bit 0 = x, bit 1 = y, bit 2 = z.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];

/// Six tetrahedra around the 0–7 diagonal. Neighboring cells split shared
/// faces the same way, so the surface has no cracks.
const TETS: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(EvalError::Mesh("non-finite vertex".into()));
        }
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i >= self.vertices.len())) {
            return Err(EvalError::Mesh(format!("triangle {t:?} indexes past {} vertices", self.vertices.len())));
        }
        Ok(())
    }

    fn corners(&self, t: &[usize; 3]) -> [[f64; 3]; 3] {
        t.map(|i| self.vertices[i])
    }

    pub fn triangle_area(&self, t: &[usize; 3]) -> f64 {
        let [a, b, c] = self.corners(t);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|t| self.triangle_area(t)).sum()
    }

    /// `n` points drawn uniformly over the surface area.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Result<Vec<[f64; 3]>, EvalError> {
        let mut cumulative = Vec::with_capacity(self.triangles.len());
        let mut total = 0.0;
        for t in &self.triangles {
            total += self.triangle_area(t);
            cumulative.push(total);
        }
        if self.triangles.is_empty() || total <= 0.0 {
            return Err(EvalError::EmptyMesh);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n)
            .map(|_| {
                let pick = rng.random::<f64>() * total;
                let idx = cumulative.partition_point(|&c| c <= pick).min(cumulative.len() - 1);
                let [a, b, c] = self.corners(&self.triangles[idx]);
                let (r1, r2): (f64, f64) = (rng.random(), rng.random());
                let s = r1.sqrt();
                let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
                [0, 1, 2].map(|d| wa * a[d] + wb * b[d] + wc * c[d])
            })
            .collect())
    }

    /// ASCII OBJ with `v` and 1-based `f` records.
    pub fn to_obj(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            out.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
        }
        for t in &self.triangles {
            out.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
        }
        out
    }

    pub fn write_obj(&self, path: &Path) -> Result<(), EvalError> {
        let io = |e: std::io::Error| EvalError::Io(format!("{}: {e}", path.display()));
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(self.to_obj().as_bytes()).map_err(io)
    }
}

/// Lattice coordinate of index `i` on an `r`-point axis spanning `[-1, 1]`.
fn coord(i: usize, r: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / (r - 1) as f64
}

/// The `r³` lattice over `[-1, 1]³`, x fastest.
pub fn lattice(r: usize) -> Vec<[f64; 3]> {
    let mut pts = Vec::with_capacity(r * r * r);
    for k in 0..r {
        for j in 0..r {
            for i in 0..r {
                pts.push([coord(i, r), coord(j, r), coord(k, r)]);
            }
        }
    }
    pts
}

/// Isosurface `value = level` of samples on the [`lattice`], by marching
/// tetrahedra. Triangles face away from the region above `level`.
pub fn isosurface(values: &[f64], r: usize, level: f64) -> Result<Mesh, EvalError> {
    if r < 2 {
        return Err(EvalError::Resolution(r));
    }
    if values.len() != r * r * r {
        return Err(EvalError::Mesh(format!("expected {} samples, got {}", r * r * r, values.len())));
    }
    let index = |i: usize, j: usize, k: usize| i + r * (j + r * k);
    let point = |g: usize| [coord(g % r, r), coord((g / r) % r, r), coord(g / (r * r), r)];
    let mut mesh = Mesh::default();
    let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();
    let mut vertex_on = |mesh: &mut Mesh, a: usize, b: usize| -> usize {
        let key = (a.min(b), a.max(b));
        *edge_vertex.entry(key).or_insert_with(|| {
            let (fa, fb) = (values[key.0], values[key.1]);
            let t = ((level - fa) / (fb - fa)).clamp(0.0, 1.0);
            let (pa, pb) = (point(key.0), point(key.1));
            mesh.vertices.push([0, 1, 2].map(|d| pa[d] + t * (pb[d] - pa[d])));
            mesh.vertices.len() - 1
        })
    };
    for k in 0..r - 1 {
        for j in 0..r - 1 {
            for i in 0..r - 1 {
                let ids = CORNERS.map(|c| index(i + c[0], j + c[1], k + c[2]));
                let inside = ids.map(|g| values[g] > level);
                if inside.iter().all(|&b| b) || inside.iter().all(|&b| !b) {
                    continue;
                }
                for tet in TETS {
                    let g = tet.map(|c| ids[c]);
                    let (ins, outs): (Vec<usize>, Vec<usize>) = g.iter().partition(|&&v| values[v] > level);
                    let tris: Vec<[usize; 3]> = match (ins.len(), outs.len()) {
                        (1, 3) => {
                            let v: Vec<usize> = outs.iter().map(|&o| vertex_on(&mut mesh, ins[0], o)).collect();
                            vec![[v[0], v[1], v[2]]]
                        }
                        (3, 1) => {
                            let v: Vec<usize> = ins.iter().map(|&i| vertex_on(&mut mesh, i, outs[0])).collect();
                            vec![[v[0], v[1], v[2]]]
                        }
                        (2, 2) => {
                            let a = vertex_on(&mut mesh, ins[0], outs[0]);
                            let b = vertex_on(&mut mesh, ins[0], outs[1]);
                            let c = vertex_on(&mut mesh, ins[1], outs[1]);
                            let d = vertex_on(&mut mesh, ins[1], outs[0]);
                            vec![[a, b, c], [a, c, d]]
                        }
                        _ => Vec::new(),
                    };
                    let centroid = |s: &[usize]| {
                        let mut c = [0.0; 3];
                        for &v in s {
                            let p = point(v);
                            (0..3).for_each(|d| c[d] += p[d] / s.len() as f64);
                        }
                        c
                    };
                    let outward = sub(centroid(&outs), centroid(&ins));
                    for mut t in tris {
                        if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                            continue;
                        }
                        let [a, b, c] = t.map(|v| mesh.vertices[v]);
                        let normal = cross(sub(b, a), sub(c, a));
                        if normal == [0.0; 3] {
                            continue;
                        }
                        if dot(normal, outward) < 0.0 {
                            t.swap(1, 2);
                        }
                        mesh.triangles.push(t);
                    }
                }
            }
        }
    }
    Ok(mesh)
}

/// Marching-tetrahedra mesh of the density level set `σ = level` over an
/// `r³` lattice spanning the scene bounds.
pub fn extract_mesh(params: &NerfParams<f32>, cfg: &FieldConfig, r: usize, level: f64) -> Result<Mesh, EvalError> {
    if r < 2 {
        return Err(EvalError::Resolution(r));
    }
    let values = densities(params, cfg, &lattice(r))?;
    isosurface(&values, r, level)
}

/// [`extract_mesh`] for any density function of scene-space position.
pub fn extract_mesh_with(density: impl Fn([f64; 3]) -> f64 + Sync, r: usize, level: f64) -> Result<Mesh, EvalError> {
    if r < 2 {
        return Err(EvalError::Resolution(r));
    }
    let values: Vec<f64> = lattice(r).par_iter().map(|p| density(*p)).collect();
    isosurface(&values, r, level)
}

/// Surface of an analytic scene from its occupancy on an `r³` lattice.
pub fn reference_mesh(spec: &SceneSpec, r: usize) -> Result<Mesh, EvalError> {
    let values: Vec<f64> = lattice(r)
        .par_iter()
        .map(|p| if spec.contains(*p) { 1.0 } else { 0.0 })
        .collect();
    isosurface(&values, r, 0.5)
}

/// Bidirectional mean of squared nearest-neighbor distances.
pub fn chamfer_points(x: &[[f64; 3]], y: &[[f64; 3]]) -> Result<f64, EvalError> {
    if x.is_empty() || y.is_empty() {
        return Err(EvalError::EmptyMesh);
    }
    let one_way = |a: &[[f64; 3]], b: &[[f64; 3]]| {
        let nearest: Vec<f64> = a
            .par_iter()
            .map(|p| b.iter().map(|q| dot(sub(*p, *q), sub(*p, *q))).fold(f64::INFINITY, f64::min))
            .collect();
        nearest.iter().sum::<f64>() / a.len() as f64
    };
    Ok(one_way(x, y) + one_way(y, x))
}

/// Chamfer distance between `n` area-uniform samples of each mesh. Both
/// meshes are sampled with the same seed.
pub fn chamfer(x: &Mesh, y: &Mesh, n: usize, seed: u64) -> Result<f64, EvalError> {
    chamfer_points(&x.sample_surface(n, seed)?, &y.sample_surface(n, seed)?)
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}
