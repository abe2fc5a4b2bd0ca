//! The on-disk formats: raw little-endian tensors (bit-exact), KITTI-style
//! 16-bit flow and depth PNGs (quantized), and flat key=value records.

use std::collections::BTreeMap;

use drift::field::{FlowField, MaskMap};
use drift::io::{
    fmt_f64, read_depth_png16, read_kitti_flow_png, write_depth_png16, write_kitti_flow_png,
    write_record, TensorFile,
};
use drift::scene::{render, SceneSpec};
use nalgebra::Vector2;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let spec = SceneSpec::static_two_plane(32, 48);
    let (t, _) = render(&spec)?;

    // tensors round-trip bit for bit
    let path = dir.path().join("depth.drft");
    TensorFile::from_field(&t.depth.values).write(&path)?;
    let back = TensorFile::read(&path)?.to_field()?;
    let bits_equal = t
        .depth
        .values
        .data()
        .iter()
        .zip(back.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    println!("tensor: {} bytes, bit-exact {}", std::fs::metadata(&path)?.len(), bits_equal);

    // flow PNG carries 1/64 px quantization
    let flow = FlowField::from_fn(32, 48, |y, x| {
        t.flow_fwd.get(y, x) + Vector2::new(0.123, 0.456)
    });
    let valid = MaskMap::new_filled(32, 48, true);
    let fp = dir.path().join("flow.png");
    write_kitti_flow_png(&fp, &flow, &valid)?;
    let (flow_back, _) = read_kitti_flow_png(&fp)?;
    let mut worst: f64 = 0.0;
    for y in 0..32 {
        for x in 0..48 {
            let d = flow_back.get(y, x) - flow.get(y, x);
            worst = worst.max(d.x.abs()).max(d.y.abs());
        }
    }
    println!("flow png: worst error {worst:.6} px (bound {:.6})", 1.0 / 128.0);

    // depth PNG stores value/256 meters, zero meaning invalid
    let dp = dir.path().join("depth.png");
    write_depth_png16(&dp, &t.depth)?;
    let depth_back = read_depth_png16(&dp)?;
    let mut worst_d: f64 = 0.0;
    for y in 0..32 {
        for x in 0..48 {
            worst_d = worst_d.max((depth_back.get(y, x) - t.depth.get(y, x)).abs());
        }
    }
    println!("depth png: worst error {worst_d:.6} m (bound {:.6})", 1.0 / 512.0);

    // records are sorted key=value lines with shortest-round-trip floats
    let mut rec = BTreeMap::new();
    rec.insert("abs_rel".to_string(), fmt_f64(0.1 + 0.2));
    rec.insert("pixels".to_string(), "1536".to_string());
    let rp = dir.path().join("metrics.txt");
    write_record(&rp, &rec)?;
    println!("record:\n{}", std::fs::read_to_string(&rp)?);
    Ok(())
}
