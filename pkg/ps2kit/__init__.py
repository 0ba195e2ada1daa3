__version__ = "0.3.0"

__all__ = [
	"config",
	"errors",
	"logger",
	"db",
	"geometry",
	"lightspace",
	"photometry",
	"networks",
	"losses",
	"checkpoint",
	"trainer",
	"datasets",
	"evaluation",
	"cli",
]
