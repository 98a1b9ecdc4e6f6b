//! Triangle meshes: file I/O, conversion to a signed distance grid, and
//! iso-surface extraction back to triangles.

mod io;
mod marching;
mod sdf;

use glam::DVec3;

use crate::error::{Error, Result};

pub use io::{
    load_mesh, load_obj_from, load_ply_from, save_mesh, save_obj_to, save_ply_colored_to,
    save_ply_to, PlyEncoding,
};
pub use marching::{marching_cubes, triangle_table};
pub use sdf::{mesh_to_sdf, sdf_header_for, DEFAULT_PADDING};

/// Triangles with area at or below this are dropped on load.
pub const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<[f32; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<[f32; 3]>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len();
        if let Some((i, t)) = triangles
            .iter()
            .enumerate()
            .find(|(_, t)| t.iter().any(|&v| v as usize >= n))
        {
            return Err(Error::InvalidInput(format!(
                "triangle {i} references vertex {:?} but mesh has {n} vertices",
                t
            )));
        }
        Ok(TriMesh {
            vertices,
            triangles,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    #[inline]
    pub fn vertex(&self, i: u32) -> DVec3 {
        let v = self.vertices[i as usize];
        DVec3::new(v[0] as f64, v[1] as f64, v[2] as f64)
    }

    pub fn triangle_points(&self, t: usize) -> [DVec3; 3] {
        self.triangles[t].map(|i| self.vertex(i))
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_points(t);
        0.5 * (b - a).cross(c - a).length()
    }

    /// Drops triangles with repeated indices or area `<= DEGENERATE_AREA`.
    /// Returns how many were removed.
    pub fn remove_degenerate(&mut self) -> usize {
        let before = self.triangles.len();
        let keep: Vec<bool> = (0..before)
            .map(|t| {
                let [a, b, c] = self.triangles[t];
                a != b && b != c && a != c && self.triangle_area(t) > DEGENERATE_AREA
            })
            .collect();
        let mut k = keep.iter();
        self.triangles.retain(|_| *k.next().unwrap());
        before - self.triangles.len()
    }

    pub fn aabb(&self) -> Option<(DVec3, DVec3)> {
        let mut it = self.vertices.iter();
        let first = it.next()?;
        let p0 = DVec3::new(first[0] as f64, first[1] as f64, first[2] as f64);
        Some(it.fold((p0, p0), |(lo, hi), v| {
            let p = DVec3::new(v[0] as f64, v[1] as f64, v[2] as f64);
            (lo.min(p), hi.max(p))
        }))
    }

    pub fn translated(&self, offset: DVec3) -> TriMesh {
        TriMesh {
            vertices: self
                .vertices
                .iter()
                .map(|v| {
                    [
                        (v[0] as f64 + offset.x) as f32,
                        (v[1] as f64 + offset.y) as f32,
                        (v[2] as f64 + offset.z) as f32,
                    ]
                })
                .collect(),
            triangles: self.triangles.clone(),
        }
    }

    pub fn scaled(&self, s: f64) -> TriMesh {
        TriMesh {
            vertices: self
                .vertices
                .iter()
                .map(|v| v.map(|c| (c as f64 * s) as f32))
                .collect(),
            triangles: self.triangles.clone(),
        }
    }

    /// Appends another mesh, offsetting its indices.
    pub fn merge(&mut self, other: &TriMesh) {
        let base = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles
            .extend(other.triangles.iter().map(|t| t.map(|i| i + base)));
    }

    /// Geodesic sphere: a subdivided icosahedron with outward winding.
    pub fn icosphere(subdivisions: u32, radius: f64, center: DVec3) -> TriMesh {
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        let mut verts: Vec<DVec3> = [
            (-1.0, phi, 0.0),
            (1.0, phi, 0.0),
            (-1.0, -phi, 0.0),
            (1.0, -phi, 0.0),
            (0.0, -1.0, phi),
            (0.0, 1.0, phi),
            (0.0, -1.0, -phi),
            (0.0, 1.0, -phi),
            (phi, 0.0, -1.0),
            (phi, 0.0, 1.0),
            (-phi, 0.0, -1.0),
            (-phi, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| DVec3::new(x, y, z).normalize())
        .collect();
        let mut faces: Vec<[u32; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut midpoint = std::collections::HashMap::new();
            let mut mid = |a: u32, b: u32, verts: &mut Vec<DVec3>| -> u32 {
                let key = (a.min(b), a.max(b));
                *midpoint.entry(key).or_insert_with(|| {
                    verts.push(((verts[a as usize] + verts[b as usize]) * 0.5).normalize());
                    (verts.len() - 1) as u32
                })
            };
            let mut next = Vec::with_capacity(faces.len() * 4);
            for [a, b, c] in faces {
                let ab = mid(a, b, &mut verts);
                let bc = mid(b, c, &mut verts);
                let ca = mid(c, a, &mut verts);
                next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            faces = next;
        }
        TriMesh {
            vertices: verts
                .iter()
                .map(|v| {
                    let p = center + *v * radius;
                    [p.x as f32, p.y as f32, p.z as f32]
                })
                .collect(),
            triangles: faces,
        }
    }
}
