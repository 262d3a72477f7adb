//! Builds one query/key composite pair and writes both, with boxes drawn, as
//! PPM files.
//!
//! ```text
//! cargo run --example copy_paste_composition -- [OUT_DIR]
//! ```

use std::path::PathBuf;

use insloc::composition::{make_pair, CompositionParams};
use insloc::imaging::{generate_gallery, write_ppm, AugmentParams};
use insloc::nn::Variant;
use insloc::rng::stream;

fn main() -> insloc::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("insloc-compose"), PathBuf::from);
    std::fs::create_dir_all(&out).map_err(|e| insloc::Error::io(&out, e))?;

    let gallery = generate_gallery(16, 64, 0)?;
    let params = CompositionParams::for_variant(Variant::C4);
    let (q, k) = make_pair(
        &gallery,
        3,
        &AugmentParams::default(),
        &params,
        &mut stream(0, "example", 0),
    )?;

    for (name, s) in [("query", &q), ("key", &k)] {
        let mut boxed = s.image.clone();
        let b = s.bbox;
        boxed.draw_rect(
            b.x1 as usize,
            b.y1 as usize,
            b.x2 as usize,
            b.y2 as usize,
            [1.0, 0.0, 0.0],
        );
        write_ppm(&s.image, out.join(format!("{name}.ppm")))?;
        write_ppm(&boxed, out.join(format!("{name}_box.ppm")))?;
        println!(
            "{name}: instance {} on background {}, box {:?}",
            s.instance_id, s.background_id, s.bbox
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}
