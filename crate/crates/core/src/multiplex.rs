//! Call-count multiplexing schedule.

/// Group that counts call number `call_number` (1-based) when groups rotate
/// every `period` calls: `floor((call_number - 1) / period) mod num_groups`.
///
/// A zero `period` or a single group always selects group 0.
#[inline]
pub fn multiplex_group_index(call_number: u64, period: u64, num_groups: usize) -> usize {
    if period == 0 || num_groups <= 1 {
        return 0;
    }
    let slot = call_number.saturating_sub(1) / period;
    (slot % num_groups as u64) as usize
}
