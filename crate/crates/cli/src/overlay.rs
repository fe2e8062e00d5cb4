//! SVG overlay of predicted and labelled 2D joints on the camera frame.

use std::fmt::Write as _;
use std::io::Cursor;

use base64::Engine as _;
use fusepose::backbone::RgbImage;

/// Keypoint pairs drawn as bones, in keypoint order.
pub const BONES: [(usize, usize); 13] = [(0, 1), (2, 3), (2, 4), (4, 6), (3, 5), (5, 7), (2, 8), (3, 9), (8, 9), (8, 10), (10, 12), (9, 11), (11, 13)];

fn png_data_uri(img: &RgbImage<f32>) -> String {
    let bytes: Vec<u8> = img.data.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes).expect("buffer matches frame size");
    let mut png = Vec::new();
    buf.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png).expect("png encoding into memory");
    format!("data:image/png;base64,{}", base64::engine::general_purpose::STANDARD.encode(png))
}

fn skeleton(s: &mut String, uv: &[[f64; 2]], color: &str) {
    for &(a, b) in &BONES {
        let (p, q) = (uv[a], uv[b]);
        if p.iter().chain(&q).all(|v| v.is_finite()) {
            let _ = writeln!(s, "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"{color}\" stroke-width=\"1.5\"/>", p[0], p[1], q[0], q[1]);
        }
    }
    for p in uv.iter().filter(|p| p.iter().all(|v| v.is_finite())) {
        let _ = writeln!(s, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.5\" fill=\"{color}\"/>", p[0], p[1]);
    }
}

/// Frame with predictions in red and labels (visible joints only) in green.
pub fn overlay_svg(img: &RgbImage<f32>, pred: &[[f64; 2]], label: Option<(&[[f64; 2]], &[bool])>) -> String {
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\">\n", img.width, img.height);
    let _ = writeln!(s, "<image width=\"{}\" height=\"{}\" href=\"{}\"/>", img.width, img.height, png_data_uri(img));
    if let Some((gt, vis)) = label {
        let masked: Vec<[f64; 2]> = gt.iter().zip(vis).map(|(p, &v)| if v { *p } else { [f64::NAN; 2] }).collect();
        skeleton(&mut s, &masked, "#30d030");
    }
    skeleton(&mut s, pred, "#e03030");
    s.push_str("</svg>\n");
    s
}
