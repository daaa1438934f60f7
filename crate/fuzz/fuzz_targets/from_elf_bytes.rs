#![no_main]

use libfuzzer_sys::fuzz_target;
use scalpel_core::symbols::SymbolMap;

fuzz_target!(|data: &[u8]| {
    if let Ok(map) = SymbolMap::from_elf_bytes(data) {
        for s in map.entries() {
            assert_eq!(map.find(s.start).map(|f| f.start), Some(s.start));
        }
    }
});
