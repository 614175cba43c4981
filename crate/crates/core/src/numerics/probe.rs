use alloc::vec::Vec;

/// Instrumentation hooks called by the forward kernels.
///
/// The default methods do nothing, so `NoProbe` compiles away. `OpCounter`
/// records what was actually executed; it is the measurement side of the
/// cost-model and channel-locality checks.
pub trait Probe {
    /// A convolution computed `out_channels` output channels, read input
    /// channels `0..in_channels_read`, and executed `macs` kernel taps times
    /// output pixels.
    fn conv(&mut self, _out_channels: usize, _in_channels_read: usize, _macs: u64) {}

    /// A dense classifier executed `macs` multiply-accumulates.
    fn linear(&mut self, _macs: u64) {}

    /// `scalars` activation values became live.
    fn alloc(&mut self, _scalars: usize) {}

    /// `scalars` activation values were released.
    fn free(&mut self, _scalars: usize) {}
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NoProbe;

impl Probe for NoProbe {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvEvent {
    pub out_channels: usize,
    pub in_channels_read: usize,
    pub macs: u64,
}

#[derive(Debug, Default, Clone)]
pub struct OpCounter {
    pub macs: u64,
    pub live: usize,
    pub peak: usize,
    pub convs: Vec<ConvEvent>,
}

impl Probe for OpCounter {
    fn conv(&mut self, out_channels: usize, in_channels_read: usize, macs: u64) {
        self.macs += macs;
        self.convs.push(ConvEvent {
            out_channels,
            in_channels_read,
            macs,
        });
    }

    fn linear(&mut self, macs: u64) {
        self.macs += macs;
    }

    fn alloc(&mut self, scalars: usize) {
        self.live += scalars;
        self.peak = self.peak.max(self.live);
    }

    fn free(&mut self, scalars: usize) {
        self.live -= scalars;
    }
}
