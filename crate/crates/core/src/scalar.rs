//! Element types storable in a storage-backed array.

use std::fmt::Debug;

use num_traits::{FromBytes, Num, NumCast, ToBytes};

/// A fixed-width numeric element with a little-endian on-storage encoding.
pub trait Element:
    Num + NumCast + Copy + Default + Debug + PartialOrd + Send + Sync + 'static
{
    const SIZE: usize;

    fn write_le(self, out: &mut [u8]);
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_element {
    ($($t:ty),*) => {$(
        impl Element for $t {
            const SIZE: usize = std::mem::size_of::<$t>();

            #[inline]
            fn write_le(self, out: &mut [u8]) {
                out[..Self::SIZE].copy_from_slice(ToBytes::to_le_bytes(&self).as_ref());
            }

            #[inline]
            fn read_le(bytes: &[u8]) -> Self {
                let raw: [u8; std::mem::size_of::<$t>()] =
                    bytes[..Self::SIZE].try_into().expect("element width");
                <$t as FromBytes>::from_le_bytes(&raw)
            }
        }
    )*};
}

impl_element!(u8, u16, u32, u64, i32, i64, f32, f64);

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip<T: Element>(v: T) -> T {
        let mut buf = [0u8; 16];
        v.write_le(&mut buf);
        T::read_le(&buf)
    }

    #[test]
    fn encodings_roundtrip() {
        assert_eq!(roundtrip(0xdead_beef_u64), 0xdead_beef);
        assert_eq!(roundtrip(-3i32), -3);
        assert_eq!(roundtrip(2.75f64), 2.75);
        assert_eq!(roundtrip(1.5f32), 1.5);
        assert_eq!(<f64 as Element>::SIZE, 8);
    }
}
