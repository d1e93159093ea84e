//! Runs the mock OCR and dictionary over the bundled menu frame and prints
//! the translated overlays.
//!
//! ```text
//! cargo run --example translate_menu
//! ```

use std::sync::Arc;

use tomk::kernel::{crate_path, load_dictionary};
use tomk::services::assist::translate_frame;
use tomk::services::ports::{FrameFixtures, Ports};

fn main() {
    let fixtures = Arc::new(FrameFixtures::load(crate_path("fixtures/frames")).expect("fixtures"));
    let dictionary = load_dictionary(&crate_path("fixtures")).expect("dictionary");
    let ports = Ports::mock(fixtures.clone(), dictionary);

    for name in ["menu", "shelf"] {
        let frame = fixtures.frame(name).expect("fixture frame");
        println!("{name} ({}x{}):", frame.width, frame.height);
        match translate_frame(frame, &ports, "en") {
            Ok(boxes) if boxes.is_empty() => println!("  no text"),
            Ok(boxes) => {
                for b in boxes {
                    let o = b.overlay();
                    println!("  [{:>3},{:>3} {:>3}x{:<3}] {} -> {}", o.bbox.x, o.bbox.y, o.bbox.w, o.bbox.h, b.source, o.text);
                }
            }
            Err(e) => println!("  failed: {e}"),
        }
        for d in ports.detect(frame).expect("detector") {
            println!("  object {} ({:.2})", d.label, d.score);
        }
    }
}
