#include "kgscat/evolution.hpp"

namespace kgscat {}
