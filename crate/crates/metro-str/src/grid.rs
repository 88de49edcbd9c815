//! Dense per-(train, station) storage with 1-based domain indexing.

/// Row-major `M x N` grid indexed by 1-based `(train, station)` pairs,
/// matching the indexing convention used throughout the line model
/// (trains `1..=M`, stations `1..=N`).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    n_trains: usize,
    n_stations: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(n_trains: usize, n_stations: usize, value: T) -> Self {
        Grid {
            n_trains,
            n_stations,
            data: vec![value; n_trains * n_stations],
        }
    }

    /// Builds a grid from train-major rows; every row must have length `n_stations`.
    pub fn from_rows(rows: &[Vec<T>]) -> Option<Self> {
        let n_trains = rows.len();
        let n_stations = rows.first().map(Vec::len)?;
        if n_stations == 0 || rows.iter().any(|r| r.len() != n_stations) {
            return None;
        }
        Some(Grid {
            n_trains,
            n_stations,
            data: rows.iter().flat_map(|r| r.iter().cloned()).collect(),
        })
    }
}

impl<T> Grid<T> {
    pub fn n_trains(&self) -> usize {
        self.n_trains
    }

    pub fn n_stations(&self) -> usize {
        self.n_stations
    }

    #[inline]
    fn offset(&self, train: usize, station: usize) -> usize {
        debug_assert!(
            (1..=self.n_trains).contains(&train) && (1..=self.n_stations).contains(&station),
            "grid index out of range: train {train}, station {station}"
        );
        (train - 1) * self.n_stations + (station - 1)
    }

    #[inline]
    pub fn get(&self, train: usize, station: usize) -> &T {
        &self.data[self.offset(train, station)]
    }

    #[inline]
    pub fn set(&mut self, train: usize, station: usize, value: T) {
        let k = self.offset(train, station);
        self.data[k] = value;
    }

    /// Iterates `(train, station, value)` in train-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        self.data
            .iter()
            .enumerate()
            .map(move |(k, v)| (k / self.n_stations + 1, k % self.n_stations + 1, v))
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks(self.n_stations)
    }
}

impl Grid<f64> {
    #[inline]
    pub fn at(&self, train: usize, station: usize) -> f64 {
        *self.get(train, station)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_based_round_trip() {
        let mut g = Grid::filled(3, 4, 0.0);
        g.set(1, 1, 1.5);
        g.set(3, 4, -2.0);
        assert_eq!(g.at(1, 1), 1.5);
        assert_eq!(g.at(3, 4), -2.0);
        assert_eq!(g.at(2, 3), 0.0);
    }

    #[test]
    fn from_rows_rejects_ragged_input() {
        assert!(Grid::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_none());
        let g = Grid::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(g.at(2, 1), 3.0);
    }

    #[test]
    fn iter_yields_train_major_order() {
        let g = Grid::from_rows(&[vec![1, 2], vec![3, 4]]).unwrap();
        let items: Vec<_> = g.iter().map(|(i, j, v)| (i, j, *v)).collect();
        assert_eq!(items, vec![(1, 1, 1), (1, 2, 2), (2, 1, 3), (2, 2, 4)]);
    }
}
