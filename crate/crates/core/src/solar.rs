//! Sun elevation and azimuth from position and UTC time, following the
//! NOAA solar calculator (Meeus low-precision series with the NOAA
//! refraction term, tapered to zero below the horizon).

use chrono::{DateTime, Datelike, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SolarError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
    #[error("year {0} outside the supported 1950-2100 range")]
    Year(i32),
}

/// Elevation in `[-90, 90]`, azimuth in `[0, 360)` clockwise from north.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SunPosition {
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
}

fn julian_day(t: &DateTime<Utc>) -> f64 {
    let secs = t.timestamp() as f64 + f64::from(t.timestamp_subsec_nanos()) * 1e-9;
    secs / 86_400.0 + 2_440_587.5
}

struct SolarTerms {
    declination_deg: f64,
    /// Equation of time, minutes.
    eq_of_time_min: f64,
}

fn solar_terms(t: &DateTime<Utc>) -> SolarTerms {
    let jc = (julian_day(t) - 2_451_545.0) / 36_525.0;

    let mean_long = (280.466_46 + jc * (36_000.769_83 + jc * 0.000_303_2)).rem_euclid(360.0);
    let mean_anom = 357.529_11 + jc * (35_999.050_29 - 0.000_153_7 * jc);
    let ecc = 0.016_708_634 - jc * (0.000_042_037 + 0.000_000_126_7 * jc);
    let m = mean_anom.to_radians();
    let center = m.sin() * (1.914_602 - jc * (0.004_817 + 0.000_014 * jc))
        + (2.0 * m).sin() * (0.019_993 - 0.000_101 * jc)
        + (3.0 * m).sin() * 0.000_289;
    let true_long = mean_long + center;
    let omega = (125.04 - 1_934.136 * jc).to_radians();
    let app_long = true_long - 0.005_69 - 0.004_78 * omega.sin();

    let mean_obliq = 23.0 + (26.0 + (21.448 - jc * (46.815 + jc * (0.000_59 - jc * 0.001_813))) / 60.0) / 60.0;
    let obliq = (mean_obliq + 0.002_56 * omega.cos()).to_radians();

    let declination = (obliq.sin() * app_long.to_radians().sin()).asin();

    let y = (obliq / 2.0).tan().powi(2);
    let l0 = mean_long.to_radians();
    let eot = y * (2.0 * l0).sin() - 2.0 * ecc * m.sin() + 4.0 * ecc * y * m.sin() * (2.0 * l0).cos()
        - 0.5 * y * y * (4.0 * l0).sin()
        - 1.25 * ecc * ecc * (2.0 * m).sin();

    SolarTerms {
        declination_deg: declination.to_degrees(),
        eq_of_time_min: 4.0 * eot.to_degrees(),
    }
}

fn minutes_of_day(t: &DateTime<Utc>) -> f64 {
    f64::from(t.num_seconds_from_midnight()) / 60.0 + f64::from(t.timestamp_subsec_nanos()) * 1e-9 / 60.0
}

/// Geometric elevation below which no refraction is applied.
const REFRACTION_FLOOR_DEG: f64 = -4.0;
const HORIZON_BRANCH_DEG: f64 = -0.575;

fn near_horizon_arcsec(e: f64) -> f64 {
    1_735.0 + e * (-518.2 + e * (103.4 + e * (-12.79 + e * 0.711)))
}

/// Atmospheric refraction correction in degrees for a geometric elevation.
///
/// Below the horizon branch the correction falls linearly to zero at
/// [`REFRACTION_FLOOR_DEG`] instead of following `-20.772 / tan(e)`, whose
/// steep slope would make apparent elevation move faster than the sun does.
fn refraction_deg(elevation_deg: f64) -> f64 {
    let e = elevation_deg;
    let arcsec = if e > 85.0 {
        0.0
    } else if e > 5.0 {
        let t = e.to_radians().tan();
        58.1 / t - 0.07 / t.powi(3) + 0.000_086 / t.powi(5)
    } else if e > HORIZON_BRANCH_DEG {
        near_horizon_arcsec(e)
    } else if e > REFRACTION_FLOOR_DEG {
        near_horizon_arcsec(HORIZON_BRANCH_DEG) * (e - REFRACTION_FLOOR_DEG)
            / (HORIZON_BRANCH_DEG - REFRACTION_FLOOR_DEG)
    } else {
        0.0
    };
    arcsec / 3600.0
}

pub fn sun_position(lat_deg: f64, lon_deg: f64, t: DateTime<Utc>) -> Result<SunPosition, SolarError> {
    if !(-90.0..=90.0).contains(&lat_deg) {
        return Err(SolarError::Latitude(lat_deg));
    }
    if !(-180.0..=180.0).contains(&lon_deg) {
        return Err(SolarError::Longitude(lon_deg));
    }
    if !(1950..=2100).contains(&t.year()) {
        return Err(SolarError::Year(t.year()));
    }
    let terms = solar_terms(&t);
    let true_solar_min = (minutes_of_day(&t) + terms.eq_of_time_min + 4.0 * lon_deg).rem_euclid(1440.0);
    let hour_angle = (true_solar_min / 4.0 - 180.0).to_radians();

    let lat = lat_deg.to_radians();
    let dec = terms.declination_deg.to_radians();
    let cos_zenith = (lat.sin() * dec.sin() + lat.cos() * dec.cos() * hour_angle.cos()).clamp(-1.0, 1.0);
    let geometric_elev = 90.0 - cos_zenith.acos().to_degrees();
    let elevation = (geometric_elev + refraction_deg(geometric_elev)).clamp(-90.0, 90.0);

    let az_south = hour_angle
        .sin()
        .atan2(hour_angle.cos() * lat.sin() - dec.tan() * lat.cos());
    let mut azimuth = (az_south.to_degrees() + 180.0).rem_euclid(360.0);
    if azimuth >= 360.0 {
        azimuth = 0.0;
    }
    Ok(SunPosition {
        elevation_deg: elevation,
        azimuth_deg: azimuth,
    })
}

/// Latitude and longitude where the sun is at the zenith at `t`.
pub fn subsolar_point(t: DateTime<Utc>) -> (f64, f64) {
    let terms = solar_terms(&t);
    let lon = (720.0 - minutes_of_day(&t) - terms.eq_of_time_min) / 4.0;
    (terms.declination_deg, (lon + 180.0).rem_euclid(360.0) - 180.0)
}
