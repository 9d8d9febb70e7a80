//! SVG exports: the density-matrix heat map and the latent-embedding
//! scatter plot. Both use fixed, documented color mappings so the
//! pictures are comparable across runs.

use std::fmt::Write as _;

use shadowcat_core::analysis::LatentPoint;
use shadowcat_core::qsim::{DensityMatrix, Pauli};

/// Hue anchors for the complex phase, degrees on the usual HSL wheel:
/// +1 -> red (0), +i -> yellow (60), -1 -> green (120), -i -> blue
/// (240), wrapping back to red. Piecewise linear between anchors.
fn phase_hue(arg: f64) -> f64 {
    let tau = core::f64::consts::TAU;
    let t = (arg.rem_euclid(tau)) / tau * 4.0; // quarter turns
    let anchors = [0.0, 60.0, 120.0, 240.0, 360.0];
    let k = (t.floor() as usize).min(3);
    let frac = t - k as f64;
    anchors[k] + frac * (anchors[k + 1] - anchors[k])
}

fn hsl_to_rgb(h: f64, s: f64, l: f64) -> (u8, u8, u8) {
    let c = (1.0 - (2.0 * l - 1.0).abs()) * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - c / 2.0;
    let to8 = |v: f64| ((v + m).clamp(0.0, 1.0) * 255.0).round() as u8;
    (to8(r), to8(g), to8(b))
}

/// Density-matrix heat map: one cell per element, hue from the complex
/// phase, darker (lower lightness) for larger magnitude; zero elements
/// render white.
pub fn rho_svg(rho: &DensityMatrix) -> String {
    let dim = rho.dim();
    let cell = 512usize.div_ceil(dim).max(4);
    let size = cell * dim;
    let max_mag = rho
        .elements()
        .iter()
        .map(|z| z.norm())
        .fold(0.0f64, f64::max)
        .max(1e-300);
    let mut out = String::new();
    write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" \
         viewBox=\"0 0 {size} {size}\">\n<rect width=\"{size}\" height=\"{size}\" fill=\"white\"/>\n"
    )
    .unwrap();
    for r in 0..dim {
        for c in 0..dim {
            let z = rho.get(r, c);
            let mag = (z.norm() / max_mag).clamp(0.0, 1.0);
            if mag < 1e-6 {
                continue;
            }
            let hue = phase_hue(z.arg());
            // lightness 1 (white) at zero magnitude down to 0.45 at full
            let (red, green, blue) = hsl_to_rgb(hue, 0.9, 1.0 - 0.55 * mag);
            writeln!(
                out,
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({red},{green},{blue})\"/>",
                c * cell,
                r * cell
            )
            .unwrap();
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Scatter color: mix cyan, magenta, yellow in proportion to the X, Y,
/// Z content of the observable string.
fn point_color(x: &shadowcat_core::qsim::ObservableString) -> (u8, u8, u8) {
    let n = x.len().max(1) as f64;
    let (mut px, mut py, mut pz) = (0.0, 0.0, 0.0);
    for p in &x.0 {
        match p {
            Pauli::X => px += 1.0 / n,
            Pauli::Y => py += 1.0 / n,
            Pauli::Z => pz += 1.0 / n,
        }
    }
    let mix = |cy: f64, ma: f64, ye: f64| ((cy * px + ma * py + ye * pz) * 255.0).round() as u8;
    // cyan (0,1,1), magenta (1,0,1), yellow (1,1,0)
    (mix(0.0, 1.0, 1.0), mix(1.0, 0.0, 1.0), mix(1.0, 1.0, 0.0))
}

/// Latent-embedding scatter: one dot per observable string at its 2D
/// t-SNE coordinate, colored by X/Y/Z proportionality.
pub fn embedding_svg(points: &[LatentPoint], coords: &[[f64; 2]]) -> String {
    let size = 640.0;
    let margin = 24.0;
    let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for c in coords {
        lo_x = lo_x.min(c[0]);
        hi_x = hi_x.max(c[0]);
        lo_y = lo_y.min(c[1]);
        hi_y = hi_y.max(c[1]);
    }
    let span_x = (hi_x - lo_x).max(1e-12);
    let span_y = (hi_y - lo_y).max(1e-12);
    let mut out = String::new();
    write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" \
         viewBox=\"0 0 {size} {size}\">\n<rect width=\"{size}\" height=\"{size}\" fill=\"white\"/>\n"
    )
    .unwrap();
    for (p, c) in points.iter().zip(coords) {
        let sx = margin + (c[0] - lo_x) / span_x * (size - 2.0 * margin);
        let sy = margin + (c[1] - lo_y) / span_y * (size - 2.0 * margin);
        let (r, g, b) = point_color(&p.x);
        writeln!(
            out,
            "<circle cx=\"{sx:.2}\" cy=\"{sy:.2}\" r=\"4\" fill=\"rgb({r},{g},{b})\"><title>{}</title></circle>",
            p.x.to_string()
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}
