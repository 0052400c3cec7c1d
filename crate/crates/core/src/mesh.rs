//! Structured triangular meshes of a rectangle, partitioned into a grid of
//! subdomains, with tagged Dirichlet/Neumann boundary segments.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("mesh dimensions must be positive, got width={width}, height={height}")]
    NonPositiveSize { width: f64, height: f64 },
    #[error("cell counts must be at least 1, got nx={nx}, ny={ny}")]
    EmptyGrid { nx: usize, ny: usize },
    #[error("subdomain grid {gx}x{gy} does not divide the {nx}x{ny} cell grid")]
    NonDivisibleGrid {
        nx: usize,
        ny: usize,
        gx: usize,
        gy: usize,
    },
    #[error("triangle {tri} references node {node}, but the mesh has {n_nodes} nodes")]
    NodeOutOfBounds {
        tri: usize,
        node: usize,
        n_nodes: usize,
    },
    #[error("triangle {tri} has non-positive signed area {area:e}")]
    NonPositiveArea { tri: usize, area: f64 },
    #[error("triangle {tri} carries subdomain label {label}; expected 1..={n}")]
    BadLabel { tri: usize, label: usize, n: usize },
    #[error("subdomain {label} has no triangles")]
    EmptySubdomain { label: usize },
    #[error("subdomain {label} is not edge-connected")]
    DisconnectedSubdomain { label: usize },
    #[error("edge ({a}, {b}) is shared by {count} triangles; the triangulation is non-conforming")]
    NonConformingEdge { a: usize, b: usize, count: usize },
    #[error("boundary edge ({a}, {b}) is not tagged")]
    UntaggedBoundaryEdge { a: usize, b: usize },
    #[error("tagged edge ({a}, {b}) does not lie on the topological boundary")]
    TagOnInteriorEdge { a: usize, b: usize },
    #[error("boundary edge ({a}, {b}) is tagged more than once")]
    DuplicateTag { a: usize, b: usize },
    #[error("mesh file parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryTag {
    Dirichlet,
    Neumann,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundaryEdge {
    pub nodes: [usize; 2],
    pub tag: BoundaryTag,
}

/// Conforming triangulation of a rectangle with per-triangle subdomain
/// labels in `1..=n_subdomains` and a fully tagged boundary.
#[derive(Clone, Debug)]
pub struct Mesh {
    pub nodes: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub subdomain_of_triangle: Vec<usize>,
    pub boundary_edges: Vec<BoundaryEdge>,
    pub n_subdomains: usize,
}

/// Default boundary predicate: clamp the x = 0 side.
pub fn default_dirichlet(x: f64, _y: f64) -> bool {
    x < 1e-12
}

/// Builds a structured mesh of `[0,width] x [0,height]` with `nx * ny` grid
/// cells, each split into two triangles along the same diagonal, partitioned
/// into a `gx * gy` grid of subdomains. Boundary edges whose midpoint
/// satisfies `dirichlet_rule` are tagged Dirichlet, the rest Neumann.
pub fn build_rect_mesh(
    width: f64,
    height: f64,
    nx: usize,
    ny: usize,
    sub_grid: (usize, usize),
    dirichlet_rule: impl Fn(f64, f64) -> bool,
) -> Result<Mesh, MeshError> {
    if !(width > 0.0 && height > 0.0) {
        return Err(MeshError::NonPositiveSize { width, height });
    }
    if nx == 0 || ny == 0 {
        return Err(MeshError::EmptyGrid { nx, ny });
    }
    let (gx, gy) = sub_grid;
    if gx == 0 || gy == 0 || nx % gx != 0 || ny % gy != 0 {
        return Err(MeshError::NonDivisibleGrid { nx, ny, gx, gy });
    }

    let node = |ix: usize, iy: usize| iy * (nx + 1) + ix;
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    for iy in 0..=ny {
        for ix in 0..=nx {
            nodes.push([
                ix as f64 * width / nx as f64,
                iy as f64 * height / ny as f64,
            ]);
        }
    }

    // Cells split along the lower-left to upper-right diagonal; both
    // triangles are counterclockwise.
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    let mut labels = Vec::with_capacity(2 * nx * ny);
    for cy in 0..ny {
        for cx in 0..nx {
            let (a, b) = (node(cx, cy), node(cx + 1, cy));
            let (c, d) = (node(cx + 1, cy + 1), node(cx, cy + 1));
            let label = (cy / (ny / gy)) * gx + cx / (nx / gx) + 1;
            triangles.push([a, b, c]);
            labels.push(label);
            triangles.push([a, c, d]);
            labels.push(label);
        }
    }

    let mut boundary_edges = Vec::with_capacity(2 * (nx + ny));
    let mut tag_edge = |a: usize, b: usize| {
        let mx = 0.5 * (nodes[a][0] + nodes[b][0]);
        let my = 0.5 * (nodes[a][1] + nodes[b][1]);
        let tag = if dirichlet_rule(mx, my) {
            BoundaryTag::Dirichlet
        } else {
            BoundaryTag::Neumann
        };
        boundary_edges.push(BoundaryEdge { nodes: [a, b], tag });
    };
    for ix in 0..nx {
        tag_edge(node(ix, 0), node(ix + 1, 0));
    }
    for iy in 0..ny {
        tag_edge(node(nx, iy), node(nx, iy + 1));
    }
    for ix in 0..nx {
        tag_edge(node(ix + 1, ny), node(ix, ny));
    }
    for iy in 0..ny {
        tag_edge(node(0, iy + 1), node(0, iy));
    }

    let mesh = Mesh {
        nodes,
        triangles,
        subdomain_of_triangle: labels,
        boundary_edges,
        n_subdomains: gx * gy,
    };
    mesh.validate()?;
    Ok(mesh)
}

fn sorted_pair(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl Mesh {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        0.5 * ((pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]))
    }

    /// Checks all structural invariants: index bounds, positive orientation,
    /// label coverage, edge conformity, boundary tagging, and per-subdomain
    /// edge-connectivity.
    pub fn validate(&self) -> Result<(), MeshError> {
        let n_nodes = self.nodes.len();
        for (t, tri) in self.triangles.iter().enumerate() {
            for &v in tri {
                if v >= n_nodes {
                    return Err(MeshError::NodeOutOfBounds {
                        tri: t,
                        node: v,
                        n_nodes,
                    });
                }
            }
            let area = self.triangle_area(t);
            if !(area > 0.0) {
                return Err(MeshError::NonPositiveArea { tri: t, area });
            }
        }

        let mut label_seen = vec![false; self.n_subdomains];
        for (t, &label) in self.subdomain_of_triangle.iter().enumerate() {
            if label == 0 || label > self.n_subdomains {
                return Err(MeshError::BadLabel {
                    tri: t,
                    label,
                    n: self.n_subdomains,
                });
            }
            label_seen[label - 1] = true;
        }
        if let Some(l) = label_seen.iter().position(|&s| !s) {
            return Err(MeshError::EmptySubdomain { label: l + 1 });
        }

        // Edge incidence: interior edges belong to exactly 2 triangles,
        // boundary edges to exactly 1, and the tagged set must equal the
        // topological boundary.
        let mut incidence: HashMap<(usize, usize), usize> = HashMap::new();
        for tri in &self.triangles {
            for k in 0..3 {
                *incidence
                    .entry(sorted_pair(tri[k], tri[(k + 1) % 3]))
                    .or_insert(0) += 1;
            }
        }
        if let Some((&(a, b), &count)) = incidence.iter().find(|&(_, &c)| c > 2) {
            return Err(MeshError::NonConformingEdge { a, b, count });
        }
        let mut tagged: HashMap<(usize, usize), usize> = HashMap::new();
        for edge in &self.boundary_edges {
            let key = sorted_pair(edge.nodes[0], edge.nodes[1]);
            if tagged.insert(key, 1).is_some() {
                return Err(MeshError::DuplicateTag {
                    a: key.0,
                    b: key.1,
                });
            }
            match incidence.get(&key) {
                Some(1) => {}
                _ => {
                    return Err(MeshError::TagOnInteriorEdge {
                        a: key.0,
                        b: key.1,
                    })
                }
            }
        }
        for (&(a, b), &count) in &incidence {
            if count == 1 && !tagged.contains_key(&(a, b)) {
                return Err(MeshError::UntaggedBoundaryEdge { a, b });
            }
        }

        self.check_connectivity()
    }

    fn check_connectivity(&self) -> Result<(), MeshError> {
        let mut by_edge: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (t, tri) in self.triangles.iter().enumerate() {
            for k in 0..3 {
                by_edge
                    .entry(sorted_pair(tri[k], tri[(k + 1) % 3]))
                    .or_default()
                    .push(t);
            }
        }
        let n_tris = self.triangles.len();
        let mut component = vec![usize::MAX; n_tris];
        let mut stack = Vec::new();
        for seed in 0..n_tris {
            if component[seed] != usize::MAX {
                continue;
            }
            let label = self.subdomain_of_triangle[seed];
            component[seed] = seed;
            stack.push(seed);
            while let Some(t) = stack.pop() {
                let tri = self.triangles[t];
                for k in 0..3 {
                    for &other in &by_edge[&sorted_pair(tri[k], tri[(k + 1) % 3])] {
                        if component[other] == usize::MAX
                            && self.subdomain_of_triangle[other] == label
                        {
                            component[other] = seed;
                            stack.push(other);
                        }
                    }
                }
            }
        }
        // A label with two distinct component seeds is disconnected.
        let mut seed_of_label: HashMap<usize, usize> = HashMap::new();
        for t in 0..n_tris {
            let label = self.subdomain_of_triangle[t];
            match seed_of_label.entry(label) {
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(component[t]);
                }
                std::collections::hash_map::Entry::Occupied(e) => {
                    if *e.get() != component[t] {
                        return Err(MeshError::DisconnectedSubdomain { label });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Nodes incident to triangles of at least two distinct subdomain labels,
/// in ascending index order.
pub fn interface_nodes(mesh: &Mesh) -> Vec<usize> {
    let mut first_label = vec![0usize; mesh.n_nodes()];
    let mut on_interface = vec![false; mesh.n_nodes()];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let label = mesh.subdomain_of_triangle[t];
        for &v in tri {
            if first_label[v] == 0 {
                first_label[v] = label;
            } else if first_label[v] != label {
                on_interface[v] = true;
            }
        }
    }
    (0..mesh.n_nodes()).filter(|&v| on_interface[v]).collect()
}

pub fn write_text<W: Write>(mesh: &Mesh, mut w: W) -> Result<(), MeshError> {
    writeln!(
        w,
        "{} nodes {} triangles {} subdomains",
        mesh.n_nodes(),
        mesh.n_triangles(),
        mesh.n_subdomains
    )?;
    for p in &mesh.nodes {
        writeln!(w, "{} {}", p[0], p[1])?;
    }
    for (tri, &label) in mesh.triangles.iter().zip(&mesh.subdomain_of_triangle) {
        writeln!(w, "{} {} {} {}", tri[0], tri[1], tri[2], label)?;
    }
    writeln!(w, "{} boundary", mesh.boundary_edges.len())?;
    for edge in &mesh.boundary_edges {
        let tag = match edge.tag {
            BoundaryTag::Dirichlet => "dirichlet",
            BoundaryTag::Neumann => "neumann",
        };
        writeln!(w, "{} {} {}", edge.nodes[0], edge.nodes[1], tag)?;
    }
    Ok(())
}

pub fn read_text<R: BufRead>(r: R) -> Result<Mesh, MeshError> {
    let parse_err = |line: usize, msg: &str| MeshError::Parse {
        line,
        msg: msg.to_string(),
    };
    let mut lines = r.lines().enumerate();
    let mut next_fields = |expect: usize, what: &str| -> Result<(usize, Vec<String>), MeshError> {
        let (i, line) = lines
            .next()
            .ok_or_else(|| parse_err(0, "unexpected end of file"))?;
        let line = line?;
        let fields: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if fields.len() != expect {
            return Err(parse_err(
                i + 1,
                &format!("expected {expect} fields ({what}), got {}", fields.len()),
            ));
        }
        Ok((i + 1, fields))
    };

    let (line, header) = next_fields(6, "header")?;
    if header[1] != "nodes" || header[3] != "triangles" || header[5] != "subdomains" {
        return Err(parse_err(line, "malformed header"));
    }
    let n_nodes: usize = header[0]
        .parse()
        .map_err(|_| parse_err(line, "bad node count"))?;
    let n_tris: usize = header[2]
        .parse()
        .map_err(|_| parse_err(line, "bad triangle count"))?;
    let n_subdomains: usize = header[4]
        .parse()
        .map_err(|_| parse_err(line, "bad subdomain count"))?;

    let mut nodes = Vec::with_capacity(n_nodes);
    for _ in 0..n_nodes {
        let (line, f) = next_fields(2, "node coordinates")?;
        let x: f64 = f[0].parse().map_err(|_| parse_err(line, "bad x"))?;
        let y: f64 = f[1].parse().map_err(|_| parse_err(line, "bad y"))?;
        nodes.push([x, y]);
    }
    let mut triangles = Vec::with_capacity(n_tris);
    let mut labels = Vec::with_capacity(n_tris);
    for _ in 0..n_tris {
        let (line, f) = next_fields(4, "triangle")?;
        let mut idx = [0usize; 3];
        for k in 0..3 {
            idx[k] = f[k]
                .parse()
                .map_err(|_| parse_err(line, "bad node index"))?;
        }
        triangles.push(idx);
        labels.push(f[3].parse().map_err(|_| parse_err(line, "bad label"))?);
    }
    let (line, f) = next_fields(2, "boundary count")?;
    if f[1] != "boundary" {
        return Err(parse_err(line, "malformed boundary header"));
    }
    let n_edges: usize = f[0]
        .parse()
        .map_err(|_| parse_err(line, "bad boundary count"))?;
    let mut boundary_edges = Vec::with_capacity(n_edges);
    for _ in 0..n_edges {
        let (line, f) = next_fields(3, "boundary edge")?;
        let a: usize = f[0].parse().map_err(|_| parse_err(line, "bad index"))?;
        let b: usize = f[1].parse().map_err(|_| parse_err(line, "bad index"))?;
        let tag = match f[2].as_str() {
            "dirichlet" => BoundaryTag::Dirichlet,
            "neumann" => BoundaryTag::Neumann,
            other => return Err(parse_err(line, &format!("unknown tag `{other}`"))),
        };
        boundary_edges.push(BoundaryEdge { nodes: [a, b], tag });
    }

    let mesh = Mesh {
        nodes,
        triangles,
        subdomain_of_triangle: labels,
        boundary_edges,
        n_subdomains,
    };
    mesh.validate()?;
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_mesh(nx: usize, ny: usize, grid: (usize, usize)) -> Mesh {
        build_rect_mesh(1.0, 1.0, nx, ny, grid, default_dirichlet).unwrap()
    }

    #[test]
    fn smallest_grid() {
        let mesh = unit_mesh(1, 1, (1, 1));
        assert_eq!(mesh.n_nodes(), 4);
        assert_eq!(mesh.n_triangles(), 2);
        assert_eq!(mesh.n_subdomains, 1);
        // The whole x = 0 side is Dirichlet: one edge covering both nodes
        // with x = 0.
        let dirichlet: Vec<_> = mesh
            .boundary_edges
            .iter()
            .filter(|e| e.tag == BoundaryTag::Dirichlet)
            .collect();
        assert_eq!(dirichlet.len(), 1);
        for e in &dirichlet {
            for &v in &e.nodes {
                assert_eq!(mesh.nodes[v][0], 0.0);
            }
        }
        assert_eq!(mesh.boundary_edges.len(), 4);
    }

    #[test]
    fn unit_square_area_partition() {
        for &(nx, ny, grid) in &[(3, 5, (1, 1)), (8, 6, (4, 2)), (12, 12, (3, 2))] {
            let mesh = unit_mesh(nx, ny, grid);
            let total: f64 = (0..mesh.n_triangles()).map(|t| mesh.triangle_area(t)).sum();
            assert!((total - 1.0).abs() <= 1e-12, "area sum {total}");
        }
    }

    #[test]
    fn triangle_count_near_seven_thousand() {
        let mesh = unit_mesh(59, 59, (1, 1));
        assert_eq!(mesh.n_triangles(), 6962);
    }

    #[test]
    fn rejects_non_divisible_grid() {
        let err = build_rect_mesh(1.0, 1.0, 59, 59, (3, 2), default_dirichlet).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("3x2") && msg.contains("59x59"), "{msg}");
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(build_rect_mesh(0.0, 1.0, 2, 2, (1, 1), default_dirichlet).is_err());
        assert!(build_rect_mesh(1.0, -2.0, 2, 2, (1, 1), default_dirichlet).is_err());
        assert!(build_rect_mesh(1.0, 1.0, 0, 2, (1, 1), default_dirichlet).is_err());
    }

    #[test]
    fn interface_empty_for_single_subdomain() {
        assert!(interface_nodes(&unit_mesh(4, 4, (1, 1))).is_empty());
    }

    #[test]
    fn interface_two_by_one() {
        let mesh = unit_mesh(2, 1, (2, 1));
        let nodes = interface_nodes(&mesh);
        assert_eq!(nodes.len(), 2);
        for &v in &nodes {
            assert!((mesh.nodes[v][0] - 0.5).abs() < 1e-15);
        }
    }

    /// Brute-force oracle: collect per-node label sets by scanning all
    /// triangles, then keep nodes with two or more distinct labels.
    fn interface_oracle(mesh: &Mesh) -> Vec<usize> {
        let mut labels: Vec<std::collections::BTreeSet<usize>> =
            vec![Default::default(); mesh.n_nodes()];
        for (t, tri) in mesh.triangles.iter().enumerate() {
            for &v in tri {
                labels[v].insert(mesh.subdomain_of_triangle[t]);
            }
        }
        (0..mesh.n_nodes()).filter(|&v| labels[v].len() >= 2).collect()
    }

    #[test]
    fn interface_matches_incidence_oracle() {
        let mesh = unit_mesh(12, 12, (3, 2));
        assert_eq!(interface_nodes(&mesh), interface_oracle(&mesh));
        assert!(!interface_nodes(&mesh).is_empty());
    }

    #[test]
    fn text_roundtrip() {
        let mesh = unit_mesh(5, 4, (1, 2));
        let mut buf = Vec::new();
        write_text(&mesh, &mut buf).unwrap();
        let back = read_text(buf.as_slice()).unwrap();
        assert_eq!(back.nodes, mesh.nodes);
        assert_eq!(back.triangles, mesh.triangles);
        assert_eq!(back.subdomain_of_triangle, mesh.subdomain_of_triangle);
        assert_eq!(back.n_subdomains, mesh.n_subdomains);
        assert_eq!(back.boundary_edges.len(), mesh.boundary_edges.len());
    }

    #[test]
    fn read_rejects_garbage() {
        let err = read_text("3 nodes x triangles 1 subdomains\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        let err = read_text("1 nodes 0 triangles 0 subdomains\n0.0 zz\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn validate_catches_orientation_flip() {
        let mut mesh = unit_mesh(2, 2, (1, 1));
        mesh.triangles[0].swap(0, 1);
        assert!(matches!(
            mesh.validate(),
            Err(MeshError::NonPositiveArea { tri: 0, .. })
        ));
    }

    #[test]
    fn validate_catches_untagged_boundary() {
        let mut mesh = unit_mesh(2, 2, (1, 1));
        mesh.boundary_edges.pop();
        assert!(matches!(
            mesh.validate(),
            Err(MeshError::UntaggedBoundaryEdge { .. })
        ));
    }

    #[test]
    fn validate_catches_disconnected_subdomain() {
        let mut mesh = unit_mesh(4, 1, (1, 1));
        // Relabel the two end cells as subdomain 1, the middle as 2: 1 is
        // split into two islands.
        mesh.n_subdomains = 2;
        for t in 0..mesh.n_triangles() {
            let cell = t / 2;
            mesh.subdomain_of_triangle[t] = if cell == 0 || cell == 3 { 1 } else { 2 };
        }
        assert!(matches!(
            mesh.validate(),
            Err(MeshError::DisconnectedSubdomain { label: 1 })
        ));
    }

    proptest! {
        #[test]
        fn conformity_and_interface_reorder_invariance(
            nx_blocks in 1usize..5,
            ny_blocks in 1usize..5,
            gx in 1usize..4,
            gy in 1usize..4,
            seed in 0u64..1000,
        ) {
            let nx = gx * nx_blocks;
            let ny = gy * ny_blocks;
            let mesh = unit_mesh(nx, ny, (gx, gy));
            prop_assert!(mesh.validate().is_ok());
            prop_assert_eq!(mesh.n_triangles(), 2 * nx * ny);
            prop_assert_eq!(mesh.n_nodes(), (nx + 1) * (ny + 1));

            // interface_nodes must not depend on triangle ordering.
            let before = interface_nodes(&mesh);
            let mut shuffled = mesh.clone();
            let mut order: Vec<usize> = (0..mesh.n_triangles()).collect();
            // Cheap deterministic shuffle.
            let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            for i in (1..order.len()).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                order.swap(i, (state % (i as u64 + 1)) as usize);
            }
            shuffled.triangles = order.iter().map(|&t| mesh.triangles[t]).collect();
            shuffled.subdomain_of_triangle =
                order.iter().map(|&t| mesh.subdomain_of_triangle[t]).collect();
            prop_assert_eq!(interface_nodes(&shuffled), before);
        }
    }
}
