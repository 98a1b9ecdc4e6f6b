//! Marching cubes over a scalar grid.
//!
//! The 256-entry triangle table is derived at first use from the cube
//! topology instead of being transcribed: every face of a cell is cut into
//! segments joining its sign-changing edges, the segments close into
//! polygons, and each polygon is fanned into triangles facing the positive
//! side. A face with four sign changes (the ambiguous saddle) always cuts
//! off its two inside corners. Both cells sharing a face see the same four
//! corner signs and therefore the same segments, so the surface is closed
//! across cells; ambiguous saddles may come out non-manifold.

use std::sync::OnceLock;

use glam::DVec3;

use super::TriMesh;
use crate::exec;
use crate::grid::ScalarGrid3;

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Corners of each cube face in cyclic order.
const FACES: [[usize; 4]; 6] = [
    [0, 1, 2, 3],
    [4, 5, 6, 7],
    [0, 1, 5, 4],
    [3, 2, 6, 7],
    [0, 3, 7, 4],
    [1, 2, 6, 5],
];

fn edge_between(a: usize, b: usize) -> usize {
    EDGES
        .iter()
        .position(|e| (e[0] == a && e[1] == b) || (e[0] == b && e[1] == a))
        .expect("corners share an edge")
}

/// Triangles (as cube edge ids) for each inside-corner bitmask. Bit `k` is
/// set when corner `k` is below the iso level.
pub fn triangle_table() -> &'static [Vec<[u8; 3]>; 256] {
    static TABLE: OnceLock<[Vec<[u8; 3]>; 256]> = OnceLock::new();
    TABLE.get_or_init(|| std::array::from_fn(|case| triangulate_case(case as u8)))
}

fn triangulate_case(case: u8) -> Vec<[u8; 3]> {
    let inside = |c: usize| case & (1 << c) != 0;
    let mut links: [Vec<usize>; 12] = Default::default();
    for face in FACES {
        let edge = |j: usize| edge_between(face[j % 4], face[(j + 1) % 4]);
        let crossing: Vec<usize> = (0..4)
            .filter(|&j| inside(face[j]) != inside(face[(j + 1) % 4]))
            .map(edge)
            .collect();
        let mut link = |a: usize, b: usize| {
            links[a].push(b);
            links[b].push(a);
        };
        match crossing.len() {
            2 => link(crossing[0], crossing[1]),
            4 => {
                for j in 0..4 {
                    if inside(face[j]) {
                        link(edge(j + 3), edge(j));
                    }
                }
            }
            _ => {}
        }
    }

    let midpoint = |e: usize| {
        let [a, b] = EDGES[e];
        let p = |c: usize| {
            DVec3::new(
                CORNERS[c][0] as f64,
                CORNERS[c][1] as f64,
                CORNERS[c][2] as f64,
            )
        };
        (p(a) + p(b)) * 0.5
    };
    let outward = |e: usize| {
        let [a, b] = EDGES[e];
        let p = |c: usize| {
            DVec3::new(
                CORNERS[c][0] as f64,
                CORNERS[c][1] as f64,
                CORNERS[c][2] as f64,
            )
        };
        if inside(a) {
            p(b) - p(a)
        } else {
            p(a) - p(b)
        }
    };

    let mut visited = [false; 12];
    let mut tris = Vec::new();
    for start in 0..12 {
        if visited[start] || links[start].is_empty() {
            continue;
        }
        let mut poly = vec![start];
        visited[start] = true;
        let (mut prev, mut cur) = (start, links[start][0]);
        while cur != start {
            poly.push(cur);
            visited[cur] = true;
            let next = if links[cur][0] != prev {
                links[cur][0]
            } else {
                links[cur][1]
            };
            prev = cur;
            cur = next;
        }
        let mut normal = DVec3::ZERO;
        for k in 0..poly.len() {
            let (a, b) = (midpoint(poly[k]), midpoint(poly[(k + 1) % poly.len()]));
            normal += DVec3::new(
                (a.y - b.y) * (a.z + b.z),
                (a.z - b.z) * (a.x + b.x),
                (a.x - b.x) * (a.y + b.y),
            );
        }
        let out: DVec3 = poly.iter().map(|&e| outward(e)).sum();
        if normal.dot(out) < 0.0 {
            poly.reverse();
        }
        for k in 1..poly.len() - 1 {
            tris.push([poly[0] as u8, poly[k] as u8, poly[k + 1] as u8]);
        }
    }
    tris
}

/// Extracts the `iso` level set as a triangle mesh in world coordinates.
/// Vertices are shared between cells; triangles face increasing values.
pub fn marching_cubes(grid: &ScalarGrid3, iso: f32) -> TriMesh {
    let hd = *grid.header();
    let [nx, ny, nz] = hd.dims;
    let values = grid.data();
    let table = triangle_table();
    // Grid edge key: 3 * (index of the lower endpoint) + axis.
    let edge_key = |cell: [usize; 3], e: usize| -> u64 {
        let [a, b] = EDGES[e];
        let ca = CORNERS[a];
        let cb = CORNERS[b];
        let axis = (0..3).find(|&k| ca[k] != cb[k]).unwrap();
        let lo = if ca[axis] < cb[axis] { ca } else { cb };
        let v = hd.index(cell[0] + lo[0], cell[1] + lo[1], cell[2] + lo[2]);
        3 * v as u64 + axis as u64
    };

    let slabs = exec::map_range(nz - 1, |z| {
        let mut out: Vec<[u64; 3]> = Vec::new();
        for y in 0..ny - 1 {
            for x in 0..nx - 1 {
                let mut case = 0u8;
                for (k, c) in CORNERS.iter().enumerate() {
                    if values[hd.index(x + c[0], y + c[1], z + c[2])] < iso {
                        case |= 1 << k;
                    }
                }
                for tri in &table[case as usize] {
                    out.push(tri.map(|e| edge_key([x, y, z], e as usize)));
                }
            }
        }
        out
    });
    let tri_keys: Vec<[u64; 3]> = slabs.into_iter().flatten().collect();

    let mut keys: Vec<u64> = tri_keys.iter().flatten().copied().collect();
    exec::stable_sort_by_key(&mut keys, |&k| k);
    keys.dedup();

    let iso64 = iso as f64;
    let vertices = exec::map_range(keys.len(), |k| {
        let key = keys[k];
        let v = (key / 3) as usize;
        let axis = (key % 3) as usize;
        let stride = [1, nx, nx * ny][axis];
        let (v0, v1) = (values[v] as f64, values[v + stride] as f64);
        let t = if v1 != v0 {
            ((iso64 - v0) / (v1 - v0)).clamp(0.0, 1.0)
        } else {
            0.5
        };
        let mut p = hd.voxel_center(v);
        p[axis] += t * hd.h();
        [p.x as f32, p.y as f32, p.z as f32]
    });
    let triangles = tri_keys
        .iter()
        .map(|t| t.map(|key| keys.binary_search(&key).unwrap() as u32))
        .collect();
    TriMesh {
        vertices,
        triangles,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridHeader;
    use std::collections::HashMap;

    #[test]
    fn trivial_cases() {
        let t = triangle_table();
        assert!(t[0].is_empty() && t[255].is_empty());
        assert_eq!(t[1].len(), 1);
        let mut e = t[1][0].to_vec();
        e.sort();
        assert_eq!(e, vec![0, 3, 8]);
        // every case uses each crossing edge and nothing else
        for case in 0..256usize {
            let crossing: Vec<u8> = (0..12u8)
                .filter(|&e| {
                    let [a, b] = EDGES[e as usize];
                    ((case >> a) & 1) != ((case >> b) & 1)
                })
                .collect();
            let mut used: Vec<u8> = t[case].iter().flatten().copied().collect();
            used.sort();
            used.dedup();
            assert_eq!(used, crossing, "case {case}");
        }
    }

    #[test]
    fn all_positive_grid_is_empty() {
        let hd = GridHeader::new([6, 6, 6], [0.0; 3], 1.0).unwrap();
        assert!(marching_cubes(&ScalarGrid3::filled(hd, 1.0), 0.0).is_empty());
    }

    #[test]
    fn interior_blob_is_closed() {
        // bumpy closed surface strictly inside the grid
        let hd = GridHeader::new([24, 24, 24], [-1.2; 3], 0.1).unwrap();
        let g = ScalarGrid3::from_world_fn(hd, |p| {
            (p.length() - 0.8 + 0.15 * (3.0 * p.x).sin() * (4.0 * p.y).cos() * (5.0 * p.z).sin())
                as f32
        });
        let m = marching_cubes(&g, 0.0);
        assert!(!m.is_empty());
        let mut edges: HashMap<(u32, u32), i32> = HashMap::new();
        for t in &m.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                // directed edges of a consistently oriented closed surface cancel
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += if a < b { 1 } else { -1 };
            }
        }
        assert!(edges.values().all(|&c| c == 0));
        // outward orientation: signed volume is positive
        let vol: f64 = (0..m.triangles.len())
            .map(|t| {
                let [a, b, c] = m.triangle_points(t);
                a.dot(b.cross(c)) / 6.0
            })
            .sum();
        assert!(vol > 0.0);
    }
}
