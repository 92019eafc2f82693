//! Encodes a short master stream, corrupts it and decodes it again.
//!
//! ```text
//! cargo run --example crne_frames
//! ```

use crane::protocol::{decode_all, encode_frame, Frame, Message};

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect::<Vec<_>>().join(" ")
}

fn main() {
    let frames = [
        Frame::new(1, 0, Message::Heartbeat),
        Frame::new(2, 1_000_000, Message::Enable),
        Frame::new(3, 2_000_000, Message::Setpoint([0.0, 0.0, 0.0, 0.1, 0.0, 0.0, 0.0, 0.0])),
        Frame::new(4, 3_000_000, Message::Estop { pressed: true }),
    ];
    let mut stream = vec![];
    for f in &frames {
        let b = encode_frame(f);
        println!("{:?} ({} bytes)\n  {}", f.msg.msg_type(), b.len(), hex(&b));
        stream.extend(b);
    }

    // flip a payload bit in the setpoint and cut the last frame short
    stream[26 + 26 + 30] ^= 0x10;
    stream.truncate(stream.len() - 3);
    println!("\ndecoding the damaged stream:");
    for r in decode_all(&stream) {
        match r {
            Ok(f) => println!("  ok    seq {} {:?}", f.seq, f.msg.msg_type()),
            Err(e) => println!("  error {} ({e})", e.code()),
        }
    }
}
