//! Little-endian binary helpers shared by the dataset and checkpoint formats.

use crate::error::{Error, Result};
use crate::outputs::{Binning, ConfoundSpec, OutputLayout};

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f32s(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.f32(*v);
        }
    }
    pub fn str(&mut self, s: &str) -> Result<()> {
        let len = u16::try_from(s.len()).map_err(|_| Error::config(format!("string too long: {s:.32}...")))?;
        self.u16(len);
        self.bytes(s.as_bytes());
        Ok(())
    }
    pub fn count(&mut self, n: usize) -> Result<()> {
        self.u16(u16::try_from(n).map_err(|_| Error::config(format!("count {n} exceeds u16")))?);
        Ok(())
    }

    pub fn layout(&mut self, layout: &OutputLayout) -> Result<()> {
        self.count(layout.label_arity())?;
        self.f64(layout.label_weight());
        self.count(layout.num_confounds())?;
        for c in layout.confounds() {
            self.str(c.name())?;
            match c.binning() {
                Binning::Categorical => {
                    self.u8(0);
                    self.count(c.arity())?;
                    for cat in c.categories() {
                        self.str(cat)?;
                    }
                }
                Binning::Edges(edges) => {
                    self.u8(1);
                    self.count(edges.len())?;
                    for e in edges {
                        self.f64(*e);
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.offset(),
                format!("truncated: needed {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }
    pub fn str(&mut self) -> Result<String> {
        let at = self.offset();
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(at, "invalid UTF-8 string"))
    }

    pub fn magic(&mut self, expected: &[u8; 4], version: u16) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            return Err(Error::format(0, format!("bad magic {got:?}, expected {expected:?}")));
        }
        let v = self.u16()?;
        if v != version {
            return Err(Error::format(4, format!("unsupported version {v}, expected {version}")));
        }
        Ok(())
    }

    pub fn layout(&mut self) -> Result<OutputLayout> {
        let at = self.offset();
        let label_arity = self.u16()? as usize;
        let weight = self.f64()?;
        let k = self.u16()? as usize;
        let mut confounds = Vec::with_capacity(k);
        for _ in 0..k {
            let at = self.offset();
            let name = self.str()?;
            let spec = match self.u8()? {
                0 => {
                    let n = self.u16()? as usize;
                    let cats = (0..n).map(|_| self.str()).collect::<Result<Vec<_>>>()?;
                    ConfoundSpec::categorical(name, cats)
                }
                1 => {
                    let n = self.u16()? as usize;
                    let edges = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
                    ConfoundSpec::binned(name, edges)
                }
                t => return Err(Error::format(at, format!("unknown binning tag {t}"))),
            }
            .map_err(|e| Error::format(at, e.to_string()))?;
            confounds.push(spec);
        }
        OutputLayout::with_weight(label_arity, confounds, weight).map_err(|e| Error::format(at, e.to_string()))
    }
}
