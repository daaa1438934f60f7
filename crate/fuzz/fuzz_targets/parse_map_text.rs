#![no_main]

use libfuzzer_sys::fuzz_target;
use scalpel_core::symbols::SymbolMap;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(map) = SymbolMap::parse_map_text(text) {
        let again = SymbolMap::parse_map_text(&map.to_map_text()).expect("rendered map must parse");
        assert_eq!(again.entries(), map.entries());
    }
});
