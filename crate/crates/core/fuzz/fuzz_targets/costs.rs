#![no_main]

use d2d_core::io;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(seqs) = io::read_costs(data, "fuzz") {
        let mut buf = Vec::new();
        io::write_costs(&mut buf, &seqs).unwrap();
        assert_eq!(io::read_costs(buf.as_slice(), "fuzz").unwrap(), seqs);
    }
});
