#include "volcast/dates.hpp"

#include "volcast/errors.hpp"

#include <cstdio>

namespace volcast::data {

// Howard Hinnant's branchless civil-calendar algorithms.
int days_from_civil(const Date& dt) {
    int y = dt.year;
    const int m = dt.month, d = dt.day;
    y -= m <= 2;
    const int era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153u * static_cast<unsigned>(m + (m > 2 ? -3 : 9)) + 2u) / 5u + static_cast<unsigned>(d) - 1u;
    const unsigned doe = yoe * 365u + yoe / 4u - yoe / 100u + doy;
    return era * 146097 + static_cast<int>(doe) - 719468;
}

Date civil_from_days(int z) {
    z += 719468;
    const int era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460u + doe / 36524u - doe / 146096u) / 365u;
    const int y = static_cast<int>(yoe) + era * 400;
    const unsigned doy = doe - (365u * yoe + yoe / 4u - yoe / 100u);
    const unsigned mp = (5u * doy + 2u) / 153u;
    const unsigned d = doy - (153u * mp + 2u) / 5u + 1u;
    const unsigned m = mp + (mp < 10u ? 3u : static_cast<unsigned>(-9));
    return Date{y + (m <= 2u), static_cast<int>(m), static_cast<int>(d)};
}

bool is_weekday(const Date& d) {
    const int z = days_from_civil(d);
    const int wd = (z >= -4 ? (z + 4) % 7 : (z + 5) % 7 + 6); // 0 = Sunday
    return wd >= 1 && wd <= 5;
}

Date next_weekday(const Date& d) {
    Date cur = civil_from_days(days_from_civil(d) + 1);
    while (!is_weekday(cur)) cur = civil_from_days(days_from_civil(cur) + 1);
    return cur;
}

std::string to_string(const Date& d) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d", d.year, d.month, d.day);
    return buf;
}

Date parse_date(const std::string& text) {
    int y = 0, m = 0, d = 0;
    char sep1 = 0, sep2 = 0;
    if (std::sscanf(text.c_str(), "%d%c%d%c%d", &y, &sep1, &m, &sep2, &d) != 5 ||
        sep1 != sep2 || (sep1 != '-' && sep1 != '/') || m < 1 || m > 12 || d < 1 || d > 31)
        throw DataError("unparseable date '" + text + "'");
    Date date{y, m, d};
    if (civil_from_days(days_from_civil(date)) != date)
        throw DataError("invalid calendar day '" + text + "'");
    return date;
}

} // namespace volcast::data
