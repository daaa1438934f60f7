//! Linux `perf_event_open` backend.
//!
//! Counters are user-mode only and attached to the calling thread, with
//! `inherit` set so threads spawned while a session is open are folded in.
//! Each group is a perf group (first unit is the leader) so its units are
//! enabled and disabled together.
//!
//! Named events map onto the kernel's generic hardware, cache and software
//! events. Raw PMU codes are written `r<hex>`; a sub-event on a raw code is
//! taken as a hex unit mask and placed in bits 8..16. Sub-events on named
//! events only label the unit and do not change what is counted.

use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};

use super::{
    is_raw_code, Activation, BackendDescriptor, BackendError, CounterBackend, CounterSample,
    EventGroup, Unit, DEFAULT_GROUP_WIDTH,
};

const PERF_TYPE_HARDWARE: u32 = 0;
const PERF_TYPE_SOFTWARE: u32 = 1;
const PERF_TYPE_HW_CACHE: u32 = 3;
const PERF_TYPE_RAW: u32 = 4;

const FLAG_DISABLED: u64 = 1 << 0;
const FLAG_INHERIT: u64 = 1 << 1;
const FLAG_EXCLUDE_KERNEL: u64 = 1 << 5;
const FLAG_EXCLUDE_HV: u64 = 1 << 6;

const PERF_EVENT_IOC_ENABLE: libc::c_ulong = 0x2400;
const PERF_EVENT_IOC_DISABLE: libc::c_ulong = 0x2401;
const PERF_IOC_FLAG_GROUP: libc::c_ulong = 1;
const PERF_FLAG_FD_CLOEXEC: libc::c_ulong = 1 << 3;

const fn cache(id: u64, op: u64, result: u64) -> u64 {
    id | (op << 8) | (result << 16)
}

// cache ids: L1D=0 L1I=1 LL=2 DTLB=3 ITLB=4 BPU=5; op READ=0; result ACCESS=0 MISS=1
const EVENT_TABLE: &[(&str, u32, u64)] = &[
    ("CPU_CYCLES", PERF_TYPE_HARDWARE, 0),
    ("CYCLES", PERF_TYPE_HARDWARE, 0),
    ("INSTRUCTIONS", PERF_TYPE_HARDWARE, 1),
    ("INST_RETIRED", PERF_TYPE_HARDWARE, 1),
    ("CACHE_REFERENCES", PERF_TYPE_HARDWARE, 2),
    ("CACHE_MISSES", PERF_TYPE_HARDWARE, 3),
    ("BRANCH_INSTRUCTIONS", PERF_TYPE_HARDWARE, 4),
    ("BRANCH_MISSES", PERF_TYPE_HARDWARE, 5),
    ("BUS_CYCLES", PERF_TYPE_HARDWARE, 6),
    ("STALLED_CYCLES_FRONTEND", PERF_TYPE_HARDWARE, 7),
    ("STALLED_CYCLES_BACKEND", PERF_TYPE_HARDWARE, 8),
    ("RESOURCE_STALLS", PERF_TYPE_HARDWARE, 8),
    ("REF_CYCLES", PERF_TYPE_HARDWARE, 9),
    ("L1D_READ_ACCESS", PERF_TYPE_HW_CACHE, cache(0, 0, 0)),
    ("L1D_ALL_REF", PERF_TYPE_HW_CACHE, cache(0, 0, 0)),
    ("L1D_READ_MISS", PERF_TYPE_HW_CACHE, cache(0, 0, 1)),
    ("DATA_CACHE_MISSES", PERF_TYPE_HW_CACHE, cache(0, 0, 1)),
    ("L1I_READ_MISS", PERF_TYPE_HW_CACHE, cache(1, 0, 1)),
    ("LLC_READ_ACCESS", PERF_TYPE_HW_CACHE, cache(2, 0, 0)),
    ("LLC_READ_MISS", PERF_TYPE_HW_CACHE, cache(2, 0, 1)),
    ("L2_LINES_IN", PERF_TYPE_HW_CACHE, cache(2, 0, 1)),
    ("DTLB_READ_MISS", PERF_TYPE_HW_CACHE, cache(3, 0, 1)),
    ("DTLB_MISSES", PERF_TYPE_HW_CACHE, cache(3, 0, 1)),
    ("ITLB_READ_MISS", PERF_TYPE_HW_CACHE, cache(4, 0, 1)),
    ("CPU_CLOCK", PERF_TYPE_SOFTWARE, 0),
    ("TASK_CLOCK", PERF_TYPE_SOFTWARE, 1),
    ("PAGE_FAULTS", PERF_TYPE_SOFTWARE, 2),
    ("CONTEXT_SWITCHES", PERF_TYPE_SOFTWARE, 3),
    ("CPU_MIGRATIONS", PERF_TYPE_SOFTWARE, 4),
    ("MINOR_FAULTS", PERF_TYPE_SOFTWARE, 5),
    ("MAJOR_FAULTS", PERF_TYPE_SOFTWARE, 6),
];

/// `struct perf_event_attr` up to `PERF_ATTR_SIZE_VER5`.
#[repr(C)]
#[derive(Default)]
struct PerfEventAttr {
    kind: u32,
    size: u32,
    config: u64,
    sample_period: u64,
    sample_type: u64,
    read_format: u64,
    flags: u64,
    wakeup_events: u32,
    bp_type: u32,
    config1: u64,
    config2: u64,
    branch_sample_type: u64,
    sample_regs_user: u64,
    sample_stack_user: u32,
    clockid: i32,
    sample_regs_intr: u64,
    aux_watermark: u32,
    sample_max_stack: u16,
    reserved: u16,
}

const _: () = assert!(std::mem::size_of::<PerfEventAttr>() == 112);

/// Kernel encoding for a unit, or `None` if the name is not recognised.
pub fn encode_unit(unit: &Unit) -> Option<(u32, u64)> {
    if is_raw_code(&unit.event_id) {
        let code = u64::from_str_radix(&unit.event_id[1..], 16).ok()?;
        let mask = match &unit.subevent {
            Some(sub) => u64::from_str_radix(sub, 16).ok()? & 0xff,
            None => 0,
        };
        return Some((PERF_TYPE_RAW, code | (mask << 8)));
    }
    EVENT_TABLE
        .iter()
        .find(|(name, _, _)| *name == unit.event_id)
        .map(|&(_, kind, config)| (kind, config))
}

#[derive(Debug, Clone)]
pub struct PerfBackend {
    descriptor: BackendDescriptor,
}

impl Default for PerfBackend {
    fn default() -> Self {
        Self::new(DEFAULT_GROUP_WIDTH)
    }
}

impl PerfBackend {
    pub fn new(group_width: usize) -> Self {
        let mut descriptor = BackendDescriptor::new("perf_event")
            .with_group_width(group_width)
            .with_known_events(EVENT_TABLE.iter().map(|(name, _, _)| *name));
        descriptor.accepts_raw_codes = true;
        Self { descriptor }
    }
}

#[derive(Debug)]
struct PerfGroup {
    /// Leader first.
    fds: Vec<OwnedFd>,
}

#[derive(Debug)]
pub struct PerfSession {
    groups: Vec<PerfGroup>,
    activation: Activation,
}

fn open_counter(kind: u32, config: u64, leader: Option<&OwnedFd>) -> std::io::Result<OwnedFd> {
    let mut flags = FLAG_INHERIT | FLAG_EXCLUDE_KERNEL | FLAG_EXCLUDE_HV;
    if leader.is_none() {
        flags |= FLAG_DISABLED;
    }
    let attr = PerfEventAttr {
        kind,
        size: std::mem::size_of::<PerfEventAttr>() as u32,
        config,
        flags,
        ..PerfEventAttr::default()
    };
    let group_fd = leader.map_or(-1, |fd| fd.as_raw_fd());
    // SAFETY: attr is a fully initialised perf_event_attr of the declared size.
    let fd = unsafe {
        libc::syscall(
            libc::SYS_perf_event_open,
            &attr as *const PerfEventAttr,
            0 as libc::pid_t,
            -1 as libc::c_int,
            group_fd as libc::c_int,
            PERF_FLAG_FD_CLOEXEC,
        )
    };
    if fd < 0 {
        return Err(std::io::Error::last_os_error());
    }
    // SAFETY: the kernel returned a fresh descriptor that nothing else owns.
    Ok(unsafe { OwnedFd::from_raw_fd(fd as libc::c_int) })
}

fn group_ioctl(group: &PerfGroup, request: libc::c_ulong) -> std::io::Result<()> {
    // SAFETY: the leader fd is open for the lifetime of `group`.
    let rc = unsafe { libc::ioctl(group.fds[0].as_raw_fd(), request as _, PERF_IOC_FLAG_GROUP) };
    if rc < 0 {
        Err(std::io::Error::last_os_error())
    } else {
        Ok(())
    }
}

fn read_counter(fd: &OwnedFd) -> std::io::Result<u64> {
    let mut value = 0u64;
    // SAFETY: reads at most 8 bytes into a u64 owned by this frame.
    let n = unsafe { libc::read(fd.as_raw_fd(), (&mut value as *mut u64).cast(), 8) };
    match n {
        8 => Ok(value),
        n if n < 0 => Err(std::io::Error::last_os_error()),
        _ => Err(std::io::Error::from(std::io::ErrorKind::UnexpectedEof)),
    }
}

impl PerfBackend {
    fn read_values(&self, group: &PerfGroup) -> Vec<u64> {
        group
            .fds
            .iter()
            .map(|fd| read_counter(fd).unwrap_or(0))
            .collect()
    }
}

impl CounterBackend for PerfBackend {
    type Session = PerfSession;

    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn open_session(&self, groups: &[EventGroup]) -> Result<PerfSession, BackendError> {
        let mut opened = Vec::with_capacity(groups.len());
        for group in groups {
            let mut fds: Vec<OwnedFd> = Vec::with_capacity(group.len());
            for unit in &group.units {
                let (kind, config) = encode_unit(unit)
                    .ok_or_else(|| BackendError::Resource(format!("unknown event {unit}")))?;
                let fd = open_counter(kind, config, fds.first())
                    .map_err(|e| BackendError::Resource(format!("{unit}: {e}")))?;
                fds.push(fd);
            }
            opened.push(PerfGroup { fds });
        }
        Ok(PerfSession {
            activation: Activation::new(opened.len()),
            groups: opened,
        })
    }

    fn start_group(&self, session: &mut PerfSession, group: usize) -> Result<(), BackendError> {
        session.activation.start(group)?;
        group_ioctl(&session.groups[group], PERF_EVENT_IOC_ENABLE).map_err(|e| {
            let _ = session.activation.stop(group);
            BackendError::Resource(format!("enable: {e}"))
        })
    }

    fn stop_group(&self, session: &mut PerfSession, group: usize) -> Result<(), BackendError> {
        session.activation.stop(group)?;
        group_ioctl(&session.groups[group], PERF_EVENT_IOC_DISABLE)
            .map_err(|e| BackendError::Resource(format!("disable: {e}")))
    }

    fn read_group(&self, session: &PerfSession, group: usize) -> Result<CounterSample, BackendError> {
        session.activation.check_index(group)?;
        Ok(CounterSample {
            group_index: group,
            values: self.read_values(&session.groups[group]),
        })
    }

    fn close_session(&self, mut session: PerfSession) -> Vec<CounterSample> {
        if let Some(active) = session.activation.active() {
            let _ = self.stop_group(&mut session, active);
        }
        session
            .groups
            .iter()
            .enumerate()
            .map(|(group_index, g)| CounterSample {
                group_index,
                values: self.read_values(g),
            })
            .collect()
    }
}
