//! Renders the two built-in oracle scenes and prints what the ground truth
//! looks like: depth layout, flow ranges, and how much of each frame
//! survives the visibility test.

use drift::scene::{render, SceneSpec};

fn depth_glyph(d: f64, lo: f64, hi: f64) -> char {
    const RAMP: &[u8] = b"@%#*+=-:. ";
    let t = ((d - lo) / (hi - lo)).clamp(0.0, 1.0);
    RAMP[(t * (RAMP.len() - 1) as f64).round() as usize] as char
}

fn show(spec: &SceneSpec, name: &str) -> Result<(), drift::DriftError> {
    let (t, t1) = render(spec)?;
    let (h, w) = (spec.height, spec.width);

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut flow_max = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            lo = lo.min(t.depth.get(y, x));
            hi = hi.max(t.depth.get(y, x));
            flow_max = flow_max.max(t.flow_fwd.get(y, x).norm());
        }
    }
    let visible = t.occlusion_fwd.count() as f64 / (h * w) as f64;

    println!("== {name} ({h}x{w}) ==");
    println!("depth range      {lo:.2} .. {hi:.2} m");
    println!("max flow         {flow_max:.2} px");
    println!("visible fraction {visible:.3}");
    println!("frame t+1 depth range {:.2} .. {:.2} m", {
        let mut m = f64::INFINITY;
        for y in 0..h {
            for x in 0..w {
                m = m.min(t1.depth.get(y, x));
            }
        }
        m
    }, {
        let mut m: f64 = 0.0;
        for y in 0..h {
            for x in 0..w {
                m = m.max(t1.depth.get(y, x));
            }
        }
        m
    });

    // coarse ASCII depth map, near = dark
    println!("depth map (near=dark, '!' = occluded next frame):");
    let (rows, cols) = (16, 48);
    for r in 0..rows {
        let mut line = String::new();
        for c in 0..cols {
            let y = r * h / rows;
            let x = c * w / cols;
            if t.occlusion_fwd.get(y, x) {
                line.push(depth_glyph(t.depth.get(y, x), lo, hi));
            } else {
                line.push('!');
            }
        }
        println!("  {line}");
    }
    println!();
    Ok(())
}

fn main() -> Result<(), drift::DriftError> {
    show(&SceneSpec::static_two_plane(64, 96), "static_two_plane")?;
    show(&SceneSpec::one_moving_plane(64, 96), "one_moving_plane")?;
    Ok(())
}
