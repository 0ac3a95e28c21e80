#pragma once

#include <compare>
#include <string>

namespace volcast::data {

/// Calendar day. Ordering is chronological.
struct Date {
    int year = 1970;
    int month = 1;
    int day = 1;

    auto operator<=>(const Date&) const = default;
};

/// Days since 1970-01-01 (negative before).
int days_from_civil(const Date& d);
Date civil_from_days(int days);

/// Monday through Friday. Trading calendars here are weekday-only (no
/// holiday table; synthetic series and file formats carry explicit dates).
bool is_weekday(const Date& d);
Date next_weekday(const Date& d);

std::string to_string(const Date& d);
/// Accepts YYYY-MM-DD and YYYY/M/D. Throws DataError on anything else.
Date parse_date(const std::string& text);

} // namespace volcast::data
